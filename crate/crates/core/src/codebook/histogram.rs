//! Code activation counts per partition.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::{CodebookModel, VqMode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::BANDS;

/// Counts of code selections: one row per band, one column per searchable
/// code (k in band-wise mode, 31·k in vanilla mode).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsageHistogram {
    pub codes_per_band: usize,
    pub counts: Vec<u64>,
}

impl UsageHistogram {
    pub fn new(codes_per_band: usize) -> Self {
        Self {
            codes_per_band,
            counts: vec![0; BANDS * codes_per_band],
        }
    }

    pub fn count(&self, band: usize, code: usize) -> u64 {
        self.counts[band * self.codes_per_band + code]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add (N, 31, H, W) index selections.
    pub fn accumulate(&mut self, indices: &[u32], pixels: usize) {
        for (i, idx) in indices.iter().enumerate() {
            let band = (i / pixels) % BANDS;
            self.counts[band * self.codes_per_band + *idx as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &UsageHistogram) -> Result<()> {
        if other.codes_per_band != self.codes_per_band {
            return Err(Error::Config("histograms over different codebooks".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
        Ok(())
    }

    /// `band,code_index,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("band,code_index,count\n");
        for band in 0..BANDS {
            for code in 0..self.codes_per_band {
                let _ = writeln!(s, "{band},{code},{}", self.count(band, code));
            }
        }
        s
    }

    /// Bar chart: one strip per band, one bar per code, heights relative to
    /// the band's most used code.
    pub fn render_png(&self, path: &Path) -> Result<()> {
        const STRIP: u32 = 24;
        let bar = if self.codes_per_band <= 256 { 3 } else { 1 };
        let width = (self.codes_per_band as u32 * bar).max(1);
        let mut img = RgbImage::from_pixel(width, STRIP * BANDS as u32, Rgb([255, 255, 255]));
        for band in 0..BANDS {
            let row = &self.counts[band * self.codes_per_band..(band + 1) * self.codes_per_band];
            let peak = row.iter().copied().max().unwrap_or(0).max(1) as f64;
            let shade = (band * 200 / BANDS) as u8;
            for (code, &c) in row.iter().enumerate() {
                let h = ((c as f64 / peak) * (STRIP - 2) as f64).round() as u32;
                for dy in 0..h {
                    for dx in 0..bar {
                        let y = (band as u32 + 1) * STRIP - 1 - dy;
                        img.put_pixel(code as u32 * bar + dx, y, Rgb([shade, 60, 200 - shade]));
                    }
                }
            }
        }
        img.save(path)?;
        Ok(())
    }
}

/// Selection counts of `model`'s codebook over a set of (N, 3, H, W) RGB
/// batches.
pub fn code_usage_histogram<'a, T: Scalar>(
    images: impl IntoIterator<Item = &'a Tensor<T>>,
    model: &CodebookModel<T>,
) -> Result<UsageHistogram> {
    let per_band = match model.config.mode {
        VqMode::BandWise => model.config.k,
        VqMode::Vanilla => BANDS * model.config.k,
    };
    let mut hist = UsageHistogram::new(per_band);
    for rgb in images {
        let (_, _, h, w) = rgb.dims4()?;
        let r = model.reconstruct(rgb)?;
        hist.accumulate(&r.indices, h * w);
    }
    Ok(hist)
}

/// `KL(p‖q) + KL(q‖p)` between two histograms normalized to distributions,
/// with `pseudocount` added to every bin so empty bins stay finite.
pub fn symmetrized_kl(a: &UsageHistogram, b: &UsageHistogram, pseudocount: f64) -> Result<f64> {
    if a.counts.len() != b.counts.len() {
        return Err(Error::Config("histograms over different codebooks".into()));
    }
    let norm = |h: &UsageHistogram| -> Vec<f64> {
        let total = h.total() as f64 + pseudocount * h.counts.len() as f64;
        h.counts.iter().map(|c| (*c as f64 + pseudocount) / total).collect()
    };
    let (p, q) = (norm(a), norm(b));
    Ok(p.iter()
        .zip(&q)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x - y) * (x / y).ln())
        .sum())
}
