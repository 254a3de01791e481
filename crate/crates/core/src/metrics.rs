//! PSNR and SSIM. SSIM uses an 11×11 Gaussian window (σ = 1.5) evaluated
//! over fully contained windows only, with k₁ = 0.01, k₂ = 0.03, and is
//! averaged over every (H, W) plane of the input.

use crate::error::{reject, Result};
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB, capped at 100 dB.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        reject!("psnr: shape {:?} vs {:?}", a.shape(), b.shape());
    }
    if a.numel() == 0 {
        reject!("psnr of empty tensors");
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over all planes, for images with values in `[0, peak]`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        reject!("ssim: shape {:?} vs {:?}", a.shape(), b.shape());
    }
    let a64: Tensor<f64> = a.cast();
    let b64: Tensor<f64> = b.cast();
    Ok(ssim_forward(&a64, &b64, peak)?.0)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filter of an (h × w) plane.
fn filter_valid<T: Scalar>(x: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![T::zero(); h * ow];
    for y in 0..h {
        for xo in 0..ow {
            let mut acc = T::zero();
            for (t, kv) in taps.iter().enumerate() {
                acc += *kv * x[y * w + xo + t];
            }
            rows[y * ow + xo] = acc;
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for yo in 0..oh {
        for (t, kv) in taps.iter().enumerate() {
            let src = &rows[(yo + t) * ow..(yo + t + 1) * ow];
            for (o, s) in out[yo * ow..(yo + 1) * ow].iter_mut().zip(src) {
                *o += *kv * *s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![T::zero(); h * ow];
    for yo in 0..oh {
        for (t, kv) in taps.iter().enumerate() {
            let dst = &mut rows[(yo + t) * ow..(yo + t + 1) * ow];
            for (d, s) in dst.iter_mut().zip(&g[yo * ow..(yo + 1) * ow]) {
                *d += *kv * *s;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for xo in 0..ow {
            let v = rows[y * ow + xo];
            for (t, kv) in taps.iter().enumerate() {
                out[y * w + xo + t] += *kv * v;
            }
        }
    }
    out
}

/// Window statistics kept from the forward pass.
pub struct SsimCache<T> {
    h: usize,
    w: usize,
    planes: usize,
    /// Per plane: mean_a, mean_b, E[a²], E[b²], E[ab] over valid windows.
    stats: Vec<[Vec<T>; 5]>,
    c1: T,
    c2: T,
}

pub(crate) fn ssim_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: T) -> Result<(T, SsimCache<T>)> {
    if a.rank() < 2 {
        reject!("ssim needs at least a 2-D image");
    }
    let r = a.rank();
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        reject!("ssim needs images of at least {0}x{0}, got {1}x{2}", SSIM_WINDOW, h, w);
    }
    let taps: Vec<T> = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::from_f64).collect();
    let hw = h * w;
    let planes = a.numel() / hw;
    let c1 = (T::from_f64(K1) * peak) * (T::from_f64(K1) * peak);
    let c2 = (T::from_f64(K2) * peak) * (T::from_f64(K2) * peak);
    let two = T::from_f64(2.0);
    let mut stats = Vec::with_capacity(planes);
    let mut total = T::zero();
    let mut windows = 0usize;
    for pl in 0..planes {
        let pa = &a.data()[pl * hw..(pl + 1) * hw];
        let pb = &b.data()[pl * hw..(pl + 1) * hw];
        let aa: Vec<T> = pa.iter().map(|v| *v * *v).collect();
        let bb: Vec<T> = pb.iter().map(|v| *v * *v).collect();
        let ab: Vec<T> = pa.iter().zip(pb).map(|(x, y)| *x * *y).collect();
        let s = [
            filter_valid(pa, h, w, &taps),
            filter_valid(pb, h, w, &taps),
            filter_valid(&aa, h, w, &taps),
            filter_valid(&bb, h, w, &taps),
            filter_valid(&ab, h, w, &taps),
        ];
        for q in 0..s[0].len() {
            let (mx, my) = (s[0][q], s[1][q]);
            let sxx = s[2][q] - mx * mx;
            let syy = s[3][q] - my * my;
            let sxy = s[4][q] - mx * my;
            let num = (two * mx * my + c1) * (two * sxy + c2);
            let den = (mx * mx + my * my + c1) * (sxx + syy + c2);
            total += num / den;
        }
        windows = s[0].len();
        stats.push(s);
    }
    let mean = total / T::from_f64((windows * planes) as f64);
    Ok((
        mean,
        SsimCache {
            h,
            w,
            planes,
            stats,
            c1,
            c2,
        },
    ))
}

/// Gradients of `g · mean SSIM` with respect to both images.
pub(crate) fn ssim_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    cache: &SsimCache<T>,
    g: T,
) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (cache.h, cache.w);
    let hw = h * w;
    let taps: Vec<T> = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::from_f64).collect();
    let (c1, c2) = (cache.c1, cache.c2);
    let two = T::from_f64(2.0);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for pl in 0..cache.planes {
        let s = &cache.stats[pl];
        let q_len = s[0].len();
        let k = g / T::from_f64((q_len * cache.planes) as f64);
        let mut d_mx = vec![T::zero(); q_len];
        let mut d_my = vec![T::zero(); q_len];
        let mut d_exx = vec![T::zero(); q_len];
        let mut d_eyy = vec![T::zero(); q_len];
        let mut d_exy = vec![T::zero(); q_len];
        for q in 0..q_len {
            let (mx, my) = (s[0][q], s[1][q]);
            let a1 = two * mx * my + c1;
            let a2 = two * (s[4][q] - mx * my) + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = s[2][q] - mx * mx + s[3][q] - my * my + c2;
            let den = b1 * b2;
            let ssim = a1 * a2 / den;
            d_mx[q] = k * ((two * my * a2 - two * my * a1) / den - ssim * (two * mx / b1 - two * mx / b2));
            d_my[q] = k * ((two * mx * a2 - two * mx * a1) / den - ssim * (two * my / b1 - two * my / b2));
            d_exx[q] = k * (-ssim / b2);
            d_eyy[q] = k * (-ssim / b2);
            d_exy[q] = k * (two * a1 / den);
        }
        let t_mx = filter_valid_adjoint(&d_mx, h, w, &taps);
        let t_my = filter_valid_adjoint(&d_my, h, w, &taps);
        let t_exx = filter_valid_adjoint(&d_exx, h, w, &taps);
        let t_eyy = filter_valid_adjoint(&d_eyy, h, w, &taps);
        let t_exy = filter_valid_adjoint(&d_exy, h, w, &taps);
        let pa = &a.data()[pl * hw..(pl + 1) * hw];
        let pb = &b.data()[pl * hw..(pl + 1) * hw];
        let oa = &mut ga.data_mut()[pl * hw..(pl + 1) * hw];
        for i in 0..hw {
            oa[i] = t_mx[i] + two * pa[i] * t_exx[i] + pb[i] * t_exy[i];
        }
        let ob = &mut gb.data_mut()[pl * hw..(pl + 1) * hw];
        for i in 0..hw {
            ob[i] = t_my[i] + two * pb[i] * t_eyy[i] + pa[i] * t_exy[i];
        }
    }
    (ga, gb)
}
