//! Spatial sorting of pixels by spectral intensity and diagonal band
//! re-scaling.
//!
//! Sorting is two-pass: every column is stably sorted along height by
//! descending key, then every row of the result is stably sorted along
//! width. The key is the per-pixel channel mean. Gradients flow through the
//! gathered values only; the ordering itself is treated as a constant.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{reject, Error, Result};
use crate::nn::norm::softmax_forward;
use crate::tensor::{Scalar, Tensor};

/// Invertible pixel map for one sample. `forward[src] = dst` and
/// `inverse[dst] = src`, both over flattened `h * width + w` indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SortPermutation {
    pub height: usize,
    pub width: usize,
    pub forward: Vec<usize>,
    pub inverse: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Original order to sorted order.
    Forward,
    /// Sorted order back to original order.
    Inverse,
}

impl SortPermutation {
    pub fn identity(height: usize, width: usize) -> Self {
        let id: Vec<usize> = (0..height * width).collect();
        Self {
            height,
            width,
            forward: id.clone(),
            inverse: id,
        }
    }

    pub fn from_forward(height: usize, width: usize, forward: Vec<usize>) -> Result<Self> {
        let n = height * width;
        if forward.len() != n {
            reject!("permutation of {} entries for a {height}x{width} grid", forward.len());
        }
        let mut inverse = vec![usize::MAX; n];
        for (src, &dst) in forward.iter().enumerate() {
            if dst >= n || inverse[dst] != usize::MAX {
                reject!("index map is not a bijection at source {src}");
            }
            inverse[dst] = src;
        }
        Ok(Self {
            height,
            width,
            forward,
            inverse,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &d)| i == d)
    }

    /// The gather map realizing `direction`: `y[p] = x[map[p]]`.
    pub fn gather_map(&self, direction: Direction) -> &[usize] {
        match direction {
            Direction::Forward => &self.inverse,
            Direction::Inverse => &self.forward,
        }
    }
}

/// Per-pixel key: mean over channels. Returns one (H·W) map per sample.
pub fn sort_keys<T: Scalar>(s: &Tensor<T>) -> Result<Vec<Vec<T>>> {
    let (n, c, h, w) = s.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_f64(c as f64);
    Ok((0..n)
        .map(|i| {
            let mut key = vec![T::zero(); hw];
            for ci in 0..c {
                for (k, v) in key.iter_mut().zip(s.plane(i, ci)) {
                    *k += *v;
                }
            }
            key.iter_mut().for_each(|k| *k *= inv);
            key
        })
        .collect())
}

/// Two-pass permutation of a single key map.
pub fn sort_permutation<T: Scalar>(key: &[T], height: usize, width: usize) -> SortPermutation {
    let desc = |a: &T, b: &T| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal);
    // After pass 1, pass1[h * width + w] holds the source pixel now at (h, w).
    let mut pass1 = vec![0usize; height * width];
    let mut col: Vec<usize> = Vec::with_capacity(height);
    for w in 0..width {
        col.clear();
        col.extend((0..height).map(|h| h * width + w));
        col.sort_by(|&a, &b| desc(&key[a], &key[b]));
        for (h, &src) in col.iter().enumerate() {
            pass1[h * width + w] = src;
        }
    }
    let mut inverse = vec![0usize; height * width];
    let mut row: Vec<usize> = Vec::with_capacity(width);
    for h in 0..height {
        row.clear();
        row.extend_from_slice(&pass1[h * width..(h + 1) * width]);
        row.sort_by(|&a, &b| desc(&key[a], &key[b]));
        inverse[h * width..(h + 1) * width].copy_from_slice(&row);
    }
    let mut forward = vec![0usize; height * width];
    for (dst, &src) in inverse.iter().enumerate() {
        forward[src] = dst;
    }
    SortPermutation {
        height,
        width,
        forward,
        inverse,
    }
}

/// Sort every sample of `s` and return the sorted tensor with its
/// permutations.
pub fn spatial_sort<T: Scalar>(s: &Tensor<T>) -> Result<(Tensor<T>, Vec<SortPermutation>)> {
    let (_, _, h, w) = s.dims4()?;
    let perms: Vec<SortPermutation> = sort_keys(s)?
        .iter()
        .map(|k| sort_permutation(k, h, w))
        .collect();
    let sorted = apply_permutation(s, &perms, Direction::Forward)?;
    Ok((sorted, perms))
}

/// Channel-wise pixel gather in either direction.
pub fn apply_permutation<T: Scalar>(
    x: &Tensor<T>,
    perms: &[SortPermutation],
    direction: Direction,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if perms.len() != n {
        reject!("{} permutations for a batch of {n}", perms.len());
    }
    if let Some(p) = perms.iter().find(|p| (p.height, p.width) != (h, w)) {
        reject!("permutation for {}x{} applied to {h}x{w}", p.height, p.width);
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for (s, perm) in perms.iter().enumerate() {
        let map = perm.gather_map(direction);
        for ci in 0..c {
            let src = x.plane(s, ci);
            let off = (s * c + ci) * hw;
            for (d, &m) in out.data_mut()[off..off + hw].iter_mut().zip(map) {
                *d = src[m];
            }
        }
    }
    Ok(out)
}

/// Graph version of [`apply_permutation`].
pub fn permute_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    perms: &[SortPermutation],
    direction: Direction,
) -> Result<Var> {
    let maps: Arc<[Vec<usize>]> = perms.iter().map(|p| p.gather_map(direction).to_vec()).collect();
    g.gather_pixels(x, maps)
}

/// Anti-diagonal split of an H × W grid. Pixel (h, w) is top-left iff its
/// center lies strictly above the line from (H, 0) to (0, W):
/// `(h + 0.5)/H + (w + 0.5)/W < 1`, evaluated exactly in integers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiagonalMask {
    pub height: usize,
    pub width: usize,
    pub tl: Vec<bool>,
}

impl DiagonalMask {
    pub fn new(height: usize, width: usize) -> Self {
        let (hh, ww) = (height as u64, width as u64);
        let tl = (0..height)
            .flat_map(|h| {
                (0..width).map(move |w| (2 * h as u64 + 1) * ww + (2 * w as u64 + 1) * hh < 2 * hh * ww)
            })
            .collect();
        Self { height, width, tl }
    }

    pub fn tl_count(&self) -> usize {
        self.tl.iter().filter(|t| **t).count()
    }

    pub fn br_count(&self) -> usize {
        self.tl.len() - self.tl_count()
    }

    pub fn tl_weights<T: Scalar>(&self) -> Arc<[T]> {
        self.tl.iter().map(|&t| if t { T::one() } else { T::zero() }).collect()
    }

    pub fn br_weights<T: Scalar>(&self) -> Arc<[T]> {
        self.tl.iter().map(|&t| if t { T::zero() } else { T::one() }).collect()
    }
}

/// Split `x` into zero-filled top-left and bottom-right parts.
pub fn diagonal_split<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, DiagonalMask)> {
    let (_, _, h, w) = x.dims4()?;
    let mask = DiagonalMask::new(h, w);
    let hw = h * w;
    let mut tl = x.clone();
    let mut br = x.clone();
    for (i, (a, b)) in tl.data_mut().iter_mut().zip(br.data_mut()).enumerate() {
        if mask.tl[i % hw] {
            *b = T::zero();
        } else {
            *a = T::zero();
        }
    }
    Ok((tl, br, mask))
}

/// Per-band softmax weights and the learnable per-band logit scale α.
#[derive(Clone, Debug)]
pub struct BandWeights<T> {
    /// (N, B); every row sums to 1.
    pub weights: Tensor<T>,
    pub alpha: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct SdrsOutput<T> {
    pub rescaled: Tensor<T>,
    pub weights: BandWeights<T>,
    /// (N, B) region-sum differences.
    pub d: Tensor<T>,
}

/// Diagonal re-scaling of a sorted spectrum `(N, B, H, W)`. With
/// `normalize_by_area`, region sums become region means.
pub fn sdrs<T: Scalar>(s_sorted: &Tensor<T>, alpha: &Tensor<T>, normalize_by_area: bool) -> Result<SdrsOutput<T>> {
    let (_, b, h, w) = s_sorted.dims4()?;
    if alpha.numel() != b {
        return Err(Error::Config(format!("alpha has {} entries for {b} bands", alpha.numel())));
    }
    let mask = DiagonalMask::new(h, w);
    let d = region_difference(s_sorted, &mask, normalize_by_area);
    let mut logits = d.clone();
    for (i, v) in logits.data_mut().iter_mut().enumerate() {
        *v *= alpha.data()[i % b];
    }
    let weights = softmax_forward(&logits, 1);
    let hw = h * w;
    let mut rescaled = s_sorted.clone();
    for (i, chunk) in rescaled.data_mut().chunks_mut(hw).enumerate() {
        let k = weights.data()[i];
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    Ok(SdrsOutput {
        rescaled,
        weights: BandWeights {
            weights,
            alpha: alpha.clone(),
        },
        d,
    })
}

/// `|Σ tl − Σ br|` per sample and band.
pub fn region_difference<T: Scalar>(s: &Tensor<T>, mask: &DiagonalMask, normalize_by_area: bool) -> Tensor<T> {
    let (n, b, h, w) = s.d4();
    let (at, ab) = if normalize_by_area {
        (
            T::one() / T::from_f64(mask.tl_count().max(1) as f64),
            T::one() / T::from_f64(mask.br_count().max(1) as f64),
        )
    } else {
        (T::one(), T::one())
    };
    let mut d = Tensor::zeros(&[n, b]);
    for (i, plane) in s.data().chunks(h * w).enumerate() {
        let (mut st, mut sb) = (T::zero(), T::zero());
        for (v, &t) in plane.iter().zip(&mask.tl) {
            if t {
                st += *v;
            } else {
                sb += *v;
            }
        }
        d.data_mut()[i] = (st * at - sb * ab).abs();
    }
    d
}

/// Graph version of [`sdrs`]; returns (rescaled spectrum, weights, D).
pub fn sdrs_var<T: Scalar>(
    g: &mut Graph<T>,
    s_sorted: Var,
    alpha: Var,
    normalize_by_area: bool,
) -> Result<(Var, Var, Var)> {
    let (_, b, h, w) = g.value(s_sorted).dims4()?;
    if g.value(alpha).numel() != b {
        return Err(Error::Config(format!(
            "alpha has {} entries for {b} bands",
            g.value(alpha).numel()
        )));
    }
    let mask = DiagonalMask::new(h, w);
    let tl = g.mask_pixels(s_sorted, mask.tl_weights())?;
    let br = g.mask_pixels(s_sorted, mask.br_weights())?;
    let mut st = g.sum_pixels(tl)?;
    let mut sb = g.sum_pixels(br)?;
    if normalize_by_area {
        st = g.affine(st, T::one() / T::from_f64(mask.tl_count().max(1) as f64), T::zero());
        sb = g.affine(sb, T::one() / T::from_f64(mask.br_count().max(1) as f64), T::zero());
    }
    let diff = g.sub(st, sb)?;
    let d = g.abs(diff);
    let logits = g.mul_row(d, alpha)?;
    let weights = g.softmax(logits, 1)?;
    let rescaled = g.scale_channels(s_sorted, weights)?;
    Ok((rescaled, weights, d))
}
