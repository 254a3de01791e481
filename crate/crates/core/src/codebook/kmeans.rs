//! Seeded Lloyd k-means for codebook initialization.

use log::{info, warn};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{SpectralCodebook, VqMode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::{stream_rng, BANDS};

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut d = T::zero();
    for (x, y) in a.iter().zip(b) {
        d += (*x - *y) * (*x - *y);
    }
    d
}

fn nearest<T: Scalar>(x: &[T], centroids: &[T], dim: usize) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (i, c) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Cluster the rows of `features` (M × dim) into `k` centroids.
///
/// Centroids start at `k` distinct random rows. Clusters that lose all
/// members are re-seeded from the point farthest from its own centroid.
/// With fewer than `k` rows the rows are repeated with small Gaussian
/// jitter, which is logged.
pub fn kmeans<T: Scalar>(features: &Tensor<T>, k: usize, iterations: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if features.rank() != 2 || features.shape()[0] == 0 || k == 0 {
        return Err(Error::Config(format!(
            "k-means needs a non-empty (M, dim) matrix and k > 0, got {:?} and k = {k}",
            features.shape()
        )));
    }
    let (m, dim) = (features.shape()[0], features.shape()[1]);
    let x = features.data();
    if m < k {
        warn!("k-means: {m} samples for {k} clusters, duplicating samples with jitter");
        let spread = x.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max).max(1.0);
        let normal = Normal::new(0.0, 1e-3 * spread).expect("finite std");
        let mut out = Vec::with_capacity(k * dim);
        for i in 0..k {
            let row = &x[(i % m) * dim..(i % m + 1) * dim];
            if i < m {
                out.extend_from_slice(row);
            } else {
                out.extend(row.iter().map(|v| *v + T::from_f64(normal.sample(rng))));
            }
        }
        return Tensor::from_vec(&[k, dim], out);
    }

    let mut picks = sample(rng, m, k).into_vec();
    picks.sort_unstable();
    let mut centroids: Vec<T> = picks.iter().flat_map(|&i| x[i * dim..(i + 1) * dim].iter().copied()).collect();
    let mut assign = vec![0usize; m];
    let mut dist = vec![T::zero(); m];
    for _ in 0..iterations {
        for i in 0..m {
            let (c, d) = nearest(&x[i * dim..(i + 1) * dim], &centroids, dim);
            assign[i] = c;
            dist[i] = d;
        }
        let mut sums = vec![T::zero(); k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..m {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(&x[i * dim..(i + 1) * dim]) {
                *s += *v;
            }
        }
        let mut taken = vec![false; m];
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point not already used for a re-seed this round
                let far = (0..m)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                dist[far] = T::zero();
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&x[far * dim..(far + 1) * dim]);
                info!("k-means: re-seeded empty cluster {c} from sample {far}");
            } else {
                let inv = T::one() / T::from_f64(counts[c] as f64);
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = *s * inv;
                }
            }
        }
    }
    Tensor::from_vec(&[k, dim], centroids)
}

/// Initialize a codebook from encoder outputs (M × n_z). Band-wise mode
/// clusters each partition independently with its own seed stream, vanilla
/// mode clusters the whole 31·k table at once.
pub fn kmeans_codebook<T: Scalar>(
    features: &Tensor<T>,
    k: usize,
    mode: VqMode,
    iterations: usize,
    seed: u64,
) -> Result<SpectralCodebook<T>> {
    let dim = features.shape().get(1).copied().unwrap_or(0);
    let table = match mode {
        VqMode::BandWise => {
            let mut data = Vec::with_capacity(BANDS * k * dim);
            for band in 0..BANDS {
                let mut rng = stream_rng(seed, band as u64);
                data.extend(kmeans(features, k, iterations, &mut rng)?.into_data());
            }
            Tensor::from_vec(&[BANDS * k, dim], data)?
        }
        VqMode::Vanilla => kmeans(features, BANDS * k, iterations, &mut stream_rng(seed, 0))?,
    };
    SpectralCodebook::new(table, k, mode)
}
