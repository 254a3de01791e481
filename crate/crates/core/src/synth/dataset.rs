//! On-disk datasets: PNG images, SPC1 cubes and a JSON-lines manifest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::info;
use serde::{Deserialize, Serialize};

use super::{clamp01, spd_to_rgb, CameraResponse, PairMeta, ReflectionPair, SynthConfig};
use crate::codebook::SpectralPairs;
use crate::cube_io::{read_cube, write_cube};
use crate::error::{reject, Error, Result};
use crate::pipeline::PairSet;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

/// One manifest line. Paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub input: String,
    pub target: String,
    pub t_cube: String,
    pub r_cube: String,
    pub meta: PairMeta,
}

/// Write a (3, H, W) or (1, 3, H, W) image with values in [0, 1] as 8-bit
/// PNG.
pub fn save_rgb_png(path: &Path, rgb: &Tensor<f32>) -> Result<()> {
    let s = rgb.shape();
    let (h, w) = match s {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => reject!("expected a (3, H, W) image, got {s:?}"),
    };
    let hw = h * w;
    let d = rgb.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[hw + i]), q(d[2 * hw + i])])
    });
    img.save(path)?;
    Ok(())
}

/// Read any image as a (3, H, W) tensor in [0, 1].
pub fn load_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Generate `config.count` pairs into `dir`. A non-empty `dir` is refused
/// unless `force` is set.
pub fn write_dataset(dir: &Path, config: &SynthConfig, cam: &CameraResponse, force: bool) -> Result<Vec<ManifestEntry>> {
    config.validate()?;
    if dir_is_nonempty(dir)? && !force {
        return Err(Error::Config(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(config.count);
    let mut manifest = String::new();
    for i in 0..config.count {
        let pair = ReflectionPair::generate(&config.sample_meta(i), cam)?;
        let id = format!("{i:05}");
        let e = ManifestEntry {
            input: format!("{id}_input.png"),
            target: format!("{id}_target.png"),
            t_cube: format!("{id}_t.spc"),
            r_cube: format!("{id}_r.spc"),
            meta: pair.meta.clone(),
            id,
        };
        save_rgb_png(&dir.join(&e.input), &pair.input)?;
        save_rgb_png(&dir.join(&e.target), &pair.target)?;
        write_cube(&dir.join(&e.t_cube), &pair.t_cube)?;
        write_cube(&dir.join(&e.r_cube), &pair.r_cube)?;
        manifest.push_str(&serde_json::to_string(&e).map_err(|e| Error::Config(e.to_string()))?);
        manifest.push('\n');
        entries.push(e);
    }
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    info!("wrote {} pairs to {}", config.count, dir.display());
    Ok(entries)
}

/// A loaded sample: RGB images plus the transmission cube.
#[derive(Clone, Debug)]
pub struct DatasetSample {
    pub id: String,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub t_cube: Tensor<f32>,
    pub r_cube: Tensor<f32>,
    pub meta: PairMeta,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Load every sample listed in the manifest. A missing directory or
/// manifest is an i/o error naming the path.
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetSample>> {
    let samples: Vec<DatasetSample> = read_manifest(dir)?
        .into_iter()
        .map(|e| {
            Ok(DatasetSample {
                input: load_rgb_png(&dir.join(&e.input))?,
                target: load_rgb_png(&dir.join(&e.target))?,
                t_cube: read_cube(&dir.join(&e.t_cube))?,
                r_cube: read_cube(&dir.join(&e.r_cube))?,
                id: e.id,
                meta: e.meta,
            })
        })
        .collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", dir.display())));
    }
    Ok(samples)
}

/// RGB/spectrum pairs for codebook training: each transmission cube with
/// its target image, plus each reflection cube with its own rendering so
/// both illuminant families are represented.
pub fn spectral_pairs(samples: &[DatasetSample], cam: &CameraResponse) -> Result<SpectralPairs<f32>> {
    let mut rgb = Vec::with_capacity(2 * samples.len());
    let mut cubes = Vec::with_capacity(2 * samples.len());
    for s in samples {
        rgb.push(s.target.clone());
        cubes.push(s.t_cube.clone());
        rgb.push(clamp01(&spd_to_rgb(&s.r_cube, cam)?));
        cubes.push(s.r_cube.clone());
    }
    SpectralPairs::new(rgb, cubes)
}

/// Degraded/clean image pairs for removal training and evaluation.
pub fn pair_set(samples: &[DatasetSample]) -> Result<PairSet<f32>> {
    PairSet::new(
        samples.iter().map(|s| s.input.clone()).collect(),
        samples.iter().map(|s| s.target.clone()).collect(),
    )
}
