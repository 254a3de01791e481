//! Synthetic spectral scenes and reflection-degraded RGB pairs.
//!
//! A scene is a set of flat-shaded shapes, each with a reflectance curve,
//! lit by one illuminant. Transmission and reflection layers are lit by
//! different illuminant families so that the two layers differ spectrally.
//! Band `i` is sampled at λᵢ = 400 + 10·i nm.

mod dataset;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{reject, Error, Result};
use crate::tensor::Tensor;
use crate::{stream_rng, BANDS};

pub use dataset::{
    load_dataset, load_rgb_png, pair_set, read_manifest, save_rgb_png, spectral_pairs, write_dataset, DatasetSample,
    ManifestEntry, MANIFEST,
};

/// Smallest scene side accepted by [`render_scene`].
pub const MIN_SCENE_SIZE: usize = 16;

pub fn wavelength(band: usize) -> f64 {
    400.0 + 10.0 * band as f64
}

pub type Spd = [f64; BANDS];

fn gaussian_curve(center: f64, sigma: f64) -> Spd {
    std::array::from_fn(|i| {
        let d = (wavelength(i) - center) / sigma;
        (-0.5 * d * d).exp()
    })
}

/// An illuminant spectral power distribution, peak-normalized to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Illuminant {
    GaussianPeak { center_nm: f64, sigma_nm: f64 },
    Flat,
    TwoPeak { centers_nm: [f64; 2], sigma_nm: f64, ratio: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlluminantKind {
    GaussianPeak,
    Flat,
    TwoPeak,
}

/// Narrowband sources (sharp peaks) versus broadband sources (flat or
/// wide peaks).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlluminantFamily {
    Narrowband,
    Broadband,
}

fn check_peak(nm: f64) -> Result<()> {
    if !(400.0..=710.0).contains(&nm) {
        reject!("illuminant peak {nm} nm lies outside 400-710 nm");
    }
    Ok(())
}

impl Illuminant {
    pub fn spd(&self) -> Result<Spd> {
        let raw = match *self {
            Illuminant::Flat => [1.0; BANDS],
            Illuminant::GaussianPeak { center_nm, sigma_nm } => {
                check_peak(center_nm)?;
                if sigma_nm <= 0.0 {
                    reject!("illuminant width must be positive, got {sigma_nm}");
                }
                gaussian_curve(center_nm, sigma_nm)
            }
            Illuminant::TwoPeak {
                centers_nm,
                sigma_nm,
                ratio,
            } => {
                centers_nm.iter().try_for_each(|c| check_peak(*c))?;
                if sigma_nm <= 0.0 || ratio < 0.0 {
                    reject!("two-peak illuminant needs positive width and nonnegative ratio");
                }
                let a = gaussian_curve(centers_nm[0], sigma_nm);
                let b = gaussian_curve(centers_nm[1], sigma_nm);
                std::array::from_fn(|i| a[i] + ratio * b[i])
            }
        };
        let peak = raw.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            reject!("illuminant has no energy in the sampled bands");
        }
        Ok(raw.map(|v| v / peak))
    }

    /// Random parameters for `kind`, drawn from the given family.
    pub fn random(kind: IlluminantKind, family: IlluminantFamily, rng: &mut impl Rng) -> Self {
        let sigma = |rng: &mut dyn rand::RngCore| match family {
            IlluminantFamily::Narrowband => rng.random_range(8.0..20.0),
            IlluminantFamily::Broadband => rng.random_range(70.0..140.0),
        };
        match kind {
            IlluminantKind::Flat => Illuminant::Flat,
            IlluminantKind::GaussianPeak => Illuminant::GaussianPeak {
                center_nm: rng.random_range(420.0..690.0),
                sigma_nm: sigma(rng),
            },
            IlluminantKind::TwoPeak => Illuminant::TwoPeak {
                centers_nm: [rng.random_range(420.0..540.0), rng.random_range(560.0..690.0)],
                sigma_nm: sigma(rng),
                ratio: rng.random_range(0.3..1.0),
            },
        }
    }

    /// A random illuminant of the family: narrowband draws one or two sharp
    /// peaks, broadband draws flat light or a wide peak.
    pub fn from_family(family: IlluminantFamily, rng: &mut impl Rng) -> Self {
        let kind = match (family, rng.random_range(0..2)) {
            (IlluminantFamily::Narrowband, 0) => IlluminantKind::GaussianPeak,
            (IlluminantFamily::Narrowband, _) => IlluminantKind::TwoPeak,
            (IlluminantFamily::Broadband, 0) => IlluminantKind::Flat,
            (IlluminantFamily::Broadband, _) => IlluminantKind::GaussianPeak,
        };
        Self::random(kind, family, rng)
    }
}

/// Seeded illuminant of the given kind; the seed drives its parameters
/// (broadband widths for single peaks, narrowband for two peaks).
pub fn make_illuminant_spd(kind: IlluminantKind, seed: u64) -> Result<Spd> {
    let mut rng = stream_rng(seed, 0);
    let family = match kind {
        IlluminantKind::TwoPeak => IlluminantFamily::Narrowband,
        _ => IlluminantFamily::Broadband,
    };
    Illuminant::random(kind, family, &mut rng).spd()
}

/// A surface reflectance curve with values in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub reflectance: Spd,
}

impl Material {
    pub fn white() -> Self {
        Self {
            reflectance: [1.0; BANDS],
        }
    }

    /// A smooth random curve: a base level plus one to three Gaussian bumps.
    pub fn random(rng: &mut impl Rng) -> Self {
        let base = rng.random_range(0.02..0.3);
        let mut r = [base; BANDS];
        for _ in 0..rng.random_range(1..=3) {
            let bump = gaussian_curve(rng.random_range(400.0..710.0), rng.random_range(20.0..80.0));
            let amp = rng.random_range(0.2..0.8);
            for (v, b) in r.iter_mut().zip(bump) {
                *v += amp * b;
            }
        }
        Self {
            reflectance: r.map(|v| v.min(1.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    /// Linear blend from the shape's material to `to` along direction
    /// `angle`, covering the whole frame.
    Gradient { angle: f64, to: Material },
}

/// A shape in normalized [0, 1]² coordinates with its material and a
/// brightness factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub shape: Shape,
    pub material: Material,
    pub brightness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub illuminant: Spd,
    pub background: Material,
    /// Painted in order; later patches cover earlier ones.
    pub patches: Vec<Patch>,
}

impl Scene {
    pub fn random(rng: &mut ChaCha8Rng, family: IlluminantFamily) -> Result<Self> {
        let illuminant = Illuminant::from_family(family, rng).spd()?;
        let background = Material::random(rng);
        let mut patches = Vec::new();
        if rng.random_bool(0.5) {
            patches.push(Patch {
                shape: Shape::Gradient {
                    angle: rng.random_range(0.0..std::f64::consts::TAU),
                    to: Material::random(rng),
                },
                material: background,
                brightness: 1.0,
            });
        }
        for _ in 0..rng.random_range(3..8) {
            let shape = if rng.random_bool(0.5) {
                let (y, x) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
                Shape::Rect {
                    y0: y,
                    x0: x,
                    y1: y + rng.random_range(0.1..0.5),
                    x1: x + rng.random_range(0.1..0.5),
                }
            } else {
                Shape::Ellipse {
                    cy: rng.random_range(0.0..1.0),
                    cx: rng.random_range(0.0..1.0),
                    ry: rng.random_range(0.05..0.3),
                    rx: rng.random_range(0.05..0.3),
                }
            };
            patches.push(Patch {
                shape,
                material: Material::random(rng),
                brightness: rng.random_range(0.5..1.0),
            });
        }
        Ok(Self {
            illuminant,
            background,
            patches,
        })
    }

    /// Radiance cube (31, H, W): reflectance × brightness × illuminant.
    pub fn render(&self, height: usize, width: usize) -> Tensor<f32> {
        let hw = height * width;
        let mut data = vec![0.0f32; BANDS * hw];
        let mut refl = [0.0; BANDS];
        for y in 0..height {
            for x in 0..width {
                let (py, px) = ((y as f64 + 0.5) / height as f64, (x as f64 + 0.5) / width as f64);
                refl.copy_from_slice(&self.background.reflectance);
                for p in &self.patches {
                    let mix = match p.shape {
                        Shape::Rect { y0, x0, y1, x1 } => (py >= y0 && py < y1 && px >= x0 && px < x1) as u8 as f64,
                        Shape::Ellipse { cy, cx, ry, rx } => {
                            let (dy, dx) = ((py - cy) / ry, (px - cx) / rx);
                            (dy * dy + dx * dx <= 1.0) as u8 as f64
                        }
                        Shape::Gradient { .. } => 1.0,
                    };
                    if mix == 0.0 {
                        continue;
                    }
                    for (b, r) in refl.iter_mut().enumerate() {
                        *r = match p.shape {
                            Shape::Gradient { angle, to } => {
                                let t = (0.5 + (px - 0.5) * angle.cos() + (py - 0.5) * angle.sin()).clamp(0.0, 1.0);
                                (1.0 - t) * p.material.reflectance[b] + t * to.reflectance[b]
                            }
                            _ => p.material.reflectance[b] * p.brightness,
                        };
                    }
                }
                for b in 0..BANDS {
                    data[b * hw + y * width + x] = (refl[b] * self.illuminant[b]) as f32;
                }
            }
        }
        Tensor::from_vec(&[BANDS, height, width], data).expect("sized above")
    }
}

/// Random scene for `seed` lit by an illuminant of `family`.
pub fn render_scene(seed: u64, height: usize, width: usize, family: IlluminantFamily) -> Result<Tensor<f32>> {
    if height < MIN_SCENE_SIZE || width < MIN_SCENE_SIZE {
        reject!("scene size {height}×{width} is below {MIN_SCENE_SIZE}×{MIN_SCENE_SIZE}");
    }
    let mut rng = stream_rng(seed, 0);
    Ok(Scene::random(&mut rng, family)?.render(height, width))
}

/// Camera sensitivities, one row of 31 band weights per RGB channel.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraResponse {
    pub rows: [Spd; 3],
}

impl Default for CameraResponse {
    /// Gaussian sensitivities peaking at 610, 550 and 450 nm (σ = 40 nm),
    /// each normalized to unit sum so that a flat unit SPD renders white.
    fn default() -> Self {
        let row = |c: f64| {
            let g = gaussian_curve(c, 40.0);
            let s: f64 = g.iter().sum();
            g.map(|v| v / s)
        };
        Self {
            rows: [row(610.0), row(550.0), row(450.0)],
        }
    }
}

impl CameraResponse {
    pub fn new(rows: [Spd; 3]) -> Result<Self> {
        for r in &rows {
            if r.iter().any(|v| *v < 0.0 || !v.is_finite()) || r.iter().sum::<f64>() <= 0.0 {
                reject!("camera response rows must be nonnegative with positive sum");
            }
        }
        Ok(Self { rows })
    }
}

/// Linear RGB rendering of a (31, H, W) cube, not clamped.
pub fn spd_to_rgb(cube: &Tensor<f32>, cam: &CameraResponse) -> Result<Tensor<f32>> {
    if cube.rank() != 3 || cube.shape()[0] != BANDS {
        reject!("expected a ({BANDS}, H, W) cube, got {:?}", cube.shape());
    }
    let hw = cube.shape()[1] * cube.shape()[2];
    let mut out = vec![0.0f32; 3 * hw];
    for (c, row) in cam.rows.iter().enumerate() {
        let dst = &mut out[c * hw..(c + 1) * hw];
        for (b, w) in row.iter().enumerate() {
            let w = *w as f32;
            for (o, v) in dst.iter_mut().zip(&cube.data()[b * hw..(b + 1) * hw]) {
                *o += w * *v;
            }
        }
    }
    Tensor::from_vec(&[3, cube.shape()[1], cube.shape()[2]], out)
}

pub(crate) fn clamp01(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Separable Gaussian blur of every plane with standard deviation `sigma`
/// pixels and edge clamping; `sigma = 0` returns the input.
pub fn gaussian_blur(cube: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    if sigma < 0.0 || !sigma.is_finite() {
        reject!("blur radius must be finite and nonnegative, got {sigma}");
    }
    if sigma == 0.0 {
        return Ok(cube.clone());
    }
    let (h, w) = (cube.shape()[1], cube.shape()[2]);
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = taps.iter().sum();
    let taps: Vec<f32> = taps.iter().map(|t| (t / s) as f32).collect();
    let mut out = cube.clone();
    let mut tmp = vec![0.0f32; h * w];
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * plane[y * w + (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[(y as isize + k as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Everything needed to regenerate a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMeta {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub weight: f64,
    pub blur_radius: f64,
    pub transmission_family: IlluminantFamily,
    pub reflection_family: IlluminantFamily,
}

#[derive(Clone, Debug)]
pub struct ReflectionPair {
    /// Degraded RGB (3, H, W) in [0, 1].
    pub input: Tensor<f32>,
    /// Clean transmission RGB (3, H, W) in [0, 1].
    pub target: Tensor<f32>,
    pub t_cube: Tensor<f32>,
    pub r_cube: Tensor<f32>,
    pub meta: PairMeta,
}

impl ReflectionPair {
    /// Regenerate a pair bit-exactly from its metadata.
    pub fn generate(meta: &PairMeta, cam: &CameraResponse) -> Result<Self> {
        let t = render_scene(meta.seed, meta.height, meta.width, meta.transmission_family)?;
        let r = render_scene(meta.seed ^ 0x5eed_0f_4ef1, meta.height, meta.width, meta.reflection_family)?;
        let mut pair = compose_reflection(&t, &r, meta.weight, meta.blur_radius, cam)?;
        pair.meta = meta.clone();
        Ok(pair)
    }
}

/// Blur and attenuate the reflection cube.
pub fn reflection_layer(r_cube: &Tensor<f32>, weight: f64, blur_radius: f64) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&weight) {
        reject!("reflection weight {weight} outside [0, 1]");
    }
    Ok(gaussian_blur(r_cube, blur_radius)?.map(|v| v * weight as f32))
}

/// `I = clamp(rgb(T + weight · blur(R)))` and `T = clamp(rgb(T))`.
pub fn compose_reflection(
    t_cube: &Tensor<f32>,
    r_cube: &Tensor<f32>,
    weight: f64,
    blur_radius: f64,
    cam: &CameraResponse,
) -> Result<ReflectionPair> {
    if t_cube.shape() != r_cube.shape() || t_cube.rank() != 3 {
        reject!("transmission {:?} and reflection {:?} cubes differ", t_cube.shape(), r_cube.shape());
    }
    let i_cube = degraded_cube(t_cube, r_cube, weight, blur_radius)?;
    Ok(ReflectionPair {
        input: clamp01(&spd_to_rgb(&i_cube, cam)?),
        target: clamp01(&spd_to_rgb(t_cube, cam)?),
        t_cube: t_cube.clone(),
        r_cube: r_cube.clone(),
        meta: PairMeta {
            seed: 0,
            height: t_cube.shape()[1],
            width: t_cube.shape()[2],
            weight,
            blur_radius,
            transmission_family: IlluminantFamily::Broadband,
            reflection_family: IlluminantFamily::Narrowband,
        },
    })
}

/// The composite cube `T + weight · blur(R)`.
pub fn degraded_cube(t_cube: &Tensor<f32>, r_cube: &Tensor<f32>, weight: f64, blur_radius: f64) -> Result<Tensor<f32>> {
    let layer = reflection_layer(r_cube, weight, blur_radius)?;
    let data = t_cube.data().iter().zip(layer.data()).map(|(a, b)| a + b).collect();
    Tensor::from_vec(t_cube.shape(), data)
}

/// Dataset generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub blur_min: f64,
    pub blur_max: f64,
    pub transmission_family: IlluminantFamily,
    pub reflection_family: IlluminantFamily,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 256,
            height: 64,
            width: 64,
            seed: 0,
            weight_min: 0.3,
            weight_max: 0.8,
            blur_min: 0.5,
            blur_max: 2.5,
            transmission_family: IlluminantFamily::Broadband,
            reflection_family: IlluminantFamily::Narrowband,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.height >= MIN_SCENE_SIZE
            && self.width >= MIN_SCENE_SIZE
            && 0.0 <= self.weight_min
            && self.weight_min <= self.weight_max
            && self.weight_max <= 1.0
            && 0.0 <= self.blur_min
            && self.blur_min <= self.blur_max;
        if !ok {
            return Err(Error::Config(format!("invalid synthesis parameters: {self:?}")));
        }
        Ok(())
    }

    /// Metadata of sample `index`; depends only on (seed, index).
    pub fn sample_meta(&self, index: usize) -> PairMeta {
        let mut rng = stream_rng(self.seed, index as u64);
        let seed = rng.random();
        let weight = if self.weight_max > self.weight_min {
            rng.random_range(self.weight_min..self.weight_max)
        } else {
            self.weight_min
        };
        let blur_radius = if self.blur_max > self.blur_min {
            rng.random_range(self.blur_min..self.blur_max)
        } else {
            self.blur_min
        };
        PairMeta {
            seed,
            height: self.height,
            width: self.width,
            weight,
            blur_radius,
            transmission_family: self.transmission_family,
            reflection_family: self.reflection_family,
        }
    }

    pub fn generate(&self, cam: &CameraResponse) -> Result<Vec<ReflectionPair>> {
        self.validate()?;
        (0..self.count).map(|i| ReflectionPair::generate(&self.sample_meta(i), cam)).collect()
    }
}
