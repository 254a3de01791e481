//! The spectral codebook: 31 partitions of K latent codes, one per
//! wavelength band, and band-wise nearest-neighbour quantization.
//!
//! In band-wise mode band `i` may only select codes from partition `i`; in
//! vanilla mode every band searches one flat table of 31·K codes (and so
//! always selects the same code).

mod histogram;
mod kmeans;
mod model;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::CodeTable;
use crate::error::{reject, Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::BANDS;

pub use histogram::{code_usage_histogram, symmetrized_kl, UsageHistogram};
pub use kmeans::{kmeans, kmeans_codebook};
pub use model::{
    reconstruct_spectrum, reconstruction_psnr, CodebookLosses, CodebookModel, CodebookTrainer, Decoder, Encoder, Reconstruction, SpectralPairs,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqMode {
    BandWise,
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    /// Codes per partition.
    pub k: usize,
    pub n_z: usize,
    /// Width of the encoder and decoder conv stacks.
    pub hidden: usize,
    pub mode: VqMode,
    /// Commitment weight.
    pub beta: f64,
    /// Codes unused for this many consecutive steps are re-seeded.
    pub dead_code_steps: u64,
    pub lr: f64,
    pub kmeans_iterations: usize,
    /// Encoder outputs sampled for k-means initialization.
    pub kmeans_samples: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            k: 256,
            n_z: 64,
            hidden: 32,
            mode: VqMode::BandWise,
            beta: 0.25,
            dead_code_steps: 500,
            lr: 1e-3,
            kmeans_iterations: 20,
            kmeans_samples: 4096,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("codebook partitions must not be empty (k = 0)".into()));
        }
        if self.n_z == 0 || self.hidden == 0 {
            return Err(Error::Config("n_z and hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Wavelength interval covered by band `i`, in nm.
pub fn band_label(band: usize) -> (u32, u32) {
    let lo = 400 + 10 * band as u32;
    (lo, lo + 10)
}

/// 31 partitions of `k` codes of dimension `n_z`, stored as one
/// (31·k, n_z) table with partition `i` in rows `[i·k, (i+1)·k)`.
#[derive(Clone, Debug)]
pub struct SpectralCodebook<T> {
    k: usize,
    n_z: usize,
    mode: VqMode,
    codes: Arc<Tensor<T>>,
}

impl<T: Scalar> SpectralCodebook<T> {
    pub fn new(codes: Tensor<T>, k: usize, mode: VqMode) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("codebook partitions must not be empty (k = 0)".into()));
        }
        if codes.rank() != 2 || codes.shape()[0] != BANDS * k || codes.shape()[1] == 0 {
            return Err(Error::Config(format!(
                "codebook table {:?} is not ({}, n_z) for k = {k}",
                codes.shape(),
                BANDS * k
            )));
        }
        if let Some(i) = codes.first_non_finite() {
            return Err(Error::NonFinite {
                context: "codebook".into(),
                detail: format!("element {i}"),
            });
        }
        let n_z = codes.shape()[1];
        Ok(Self {
            k,
            n_z,
            mode,
            codes: Arc::new(codes),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn mode(&self) -> VqMode {
        self.mode
    }

    pub fn codes(&self) -> &Tensor<T> {
        &self.codes
    }

    /// Rows of partition `band`, (k × n_z).
    pub fn partition(&self, band: usize) -> &[T] {
        &self.codes.data()[band * self.k * self.n_z..(band + 1) * self.k * self.n_z]
    }

    /// Rows a band may select from: its partition, or the whole table in
    /// vanilla mode.
    pub fn searchable_rows(&self) -> usize {
        match self.mode {
            VqMode::BandWise => self.k,
            VqMode::Vanilla => BANDS * self.k,
        }
    }

    pub fn table(&self) -> CodeTable<T> {
        let band_offsets = match self.mode {
            VqMode::BandWise => (0..BANDS).map(|b| b * self.k).collect(),
            VqMode::Vanilla => vec![0; BANDS],
        };
        CodeTable {
            codes: self.codes.clone(),
            band_offsets,
            rows_per_band: self.searchable_rows(),
            n_z: self.n_z,
        }
    }
}

/// Band-wise quantization of an (N, n_z, H, W) feature map.
#[derive(Clone, Debug)]
pub struct QuantizeResult<T> {
    /// (N, 31·n_z, H, W): band `i` occupies channels `[i·n_z, (i+1)·n_z)`.
    pub quantized: Tensor<T>,
    /// (N, 31, H, W) selected code ids; in band-wise mode an id in `[0, k)`
    /// relative to the band's partition, in vanilla mode a row of the flat
    /// table.
    pub indices: Vec<u32>,
    /// (N, 31, H, W) squared distances to the selected codes.
    pub distances: Tensor<T>,
}

impl<T: Scalar> QuantizeResult<T> {
    pub fn index(&self, n: usize, band: usize, h: usize, w: usize) -> u32 {
        let (_, _, hh, ww) = self.distances.d4();
        self.indices[((n * BANDS + band) * hh + h) * ww + w]
    }
}

/// Nearest code for every (sample, band, pixel), with ties going to the
/// lowest index. Returns the indices and squared distances, both laid out
/// as (N, 31, H, W).
///
/// Candidates are ranked with a gemm expansion `|z|² − 2 z·c + |c|²`; every
/// code within the expansion's rounding bound of the best is then re-scored
/// with the direct sum `Σ (z_j − c_j)²`, so the result is the same as an
/// exhaustive direct scan.
pub fn band_indices<T: Scalar>(zhat: &Tensor<T>, book: &SpectralCodebook<T>) -> Result<(Vec<u32>, Tensor<T>)> {
    let (n, nz, h, w) = zhat.dims4()?;
    if nz != book.n_z {
        reject!("features have {nz} channels, codebook expects n_z = {}", book.n_z);
    }
    if let Some(i) = zhat.first_non_finite() {
        return Err(Error::NonFinite {
            context: "features to quantize".into(),
            detail: format!("element {i}"),
        });
    }
    let hw = h * w;
    let codes = book.codes.data();
    let rows = book.codes.shape()[0];
    let norms: Vec<T> = codes.chunks(nz).map(|c| c.iter().map(|v| *v * *v).sum()).collect();
    let max_norm = norms.iter().copied().fold(T::zero(), T::max);
    let slack = T::epsilon() * T::from_f64(8.0 * (nz + 4) as f64);
    let span = book.searchable_rows();

    const CHUNK: usize = 64;
    let mut scores = vec![T::zero(); CHUNK * rows];
    let mut zbuf = vec![T::zero(); nz];
    let mut indices = vec![0u32; n * BANDS * hw];
    let mut dist = Tensor::zeros(&[n, BANDS, h, w]);
    for s in 0..n {
        let zs = zhat.sample(s);
        for p0 in (0..hw).step_by(CHUNK) {
            let pc = CHUNK.min(hw - p0);
            T::gemm(
                pc,
                nz,
                rows,
                &zs[p0..],
                1,
                hw as isize,
                codes,
                1,
                nz as isize,
                T::zero(),
                &mut scores,
                rows as isize,
                1,
            );
            for pi in 0..pc {
                let p = p0 + pi;
                for (j, z) in zbuf.iter_mut().enumerate() {
                    *z = zs[j * hw + p];
                }
                let zn: T = zbuf.iter().map(|v| *v * *v).sum();
                let margin = slack * (zn + max_norm);
                let row_scores = &scores[pi * rows..(pi + 1) * rows];
                let search = |base: usize| -> (u32, T) {
                    let two = T::from_f64(2.0);
                    let approx = |r: usize| zn - two * row_scores[r] + norms[r];
                    let mut lo = approx(base);
                    for r in base + 1..base + span {
                        lo = lo.min(approx(r));
                    }
                    let mut best = (0u32, T::infinity());
                    for r in base..base + span {
                        if approx(r) <= lo + margin {
                            let c = &codes[r * nz..(r + 1) * nz];
                            let mut d = T::zero();
                            for (a, b) in zbuf.iter().zip(c) {
                                d += (*a - *b) * (*a - *b);
                            }
                            if d < best.1 {
                                best = ((r - base) as u32, d);
                            }
                        }
                    }
                    best
                };
                match book.mode {
                    VqMode::BandWise => {
                        for band in 0..BANDS {
                            let (i, d) = search(band * book.k);
                            indices[(s * BANDS + band) * hw + p] = i;
                            dist.data_mut()[(s * BANDS + band) * hw + p] = d;
                        }
                    }
                    VqMode::Vanilla => {
                        let (i, d) = search(0);
                        for band in 0..BANDS {
                            indices[(s * BANDS + band) * hw + p] = i;
                            dist.data_mut()[(s * BANDS + band) * hw + p] = d;
                        }
                    }
                }
            }
        }
    }
    Ok((indices, dist))
}

/// Quantize every pixel feature against every band's partition.
pub fn band_quantize<T: Scalar>(zhat: &Tensor<T>, book: &SpectralCodebook<T>) -> Result<QuantizeResult<T>> {
    let (indices, distances) = band_indices(zhat, book)?;
    let (n, nz, h, w) = zhat.d4();
    let hw = h * w;
    let table = book.table();
    let mut quantized = Tensor::zeros(&[n, BANDS * nz, h, w]);
    for s in 0..n {
        for band in 0..BANDS {
            for p in 0..hw {
                let code = table.code(band, indices[(s * BANDS + band) * hw + p] as usize);
                for (j, c) in code.iter().enumerate() {
                    quantized.data_mut()[((s * BANDS + band) * nz + j) * hw + p] = *c;
                }
            }
        }
    }
    Ok(QuantizeResult {
        quantized,
        indices,
        distances,
    })
}
