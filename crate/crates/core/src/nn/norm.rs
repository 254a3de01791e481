//! Softmax along an axis and per-pixel channel layer normalization.

use crate::error::{reject, Result};
use crate::tensor::{FeatureMap, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// (outer, axis length, inner) strides for reducing along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        reject!("softmax axis {} out of range for rank {}", axis, x.rank());
    }
    Ok(softmax_forward(x, axis))
}

pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = xd[base];
            for k in 1..len {
                mx = mx.max(xd[base + k * inner]);
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (xd[base + k * inner] - mx).exp();
                od[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                od[base + k * inner] /= sum;
            }
        }
    }
    out
}

/// Softmax Jacobian-vector product given the forward output `y`.
pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut gx = Tensor::zeros(y.shape());
    let yd = y.data();
    let gd = gy.data();
    let out = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                dot += yd[base + k * inner] * gd[base + k * inner];
            }
            for k in 0..len {
                let idx = base + k * inner;
                out[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    gx
}

/// Normalize each pixel across channels, then apply a per-channel affine.
pub fn layer_norm<T: Scalar>(
    x: &FeatureMap<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<FeatureMap<T>> {
    let (_, c, _, _) = x.dims4()?;
    if gamma.numel() != c || beta.numel() != c {
        reject!("layer norm affine has {} entries, input has {} channels", gamma.numel(), c);
    }
    Ok(layer_norm_forward(x, gamma, beta).0)
}

/// Returns (output, normalized input, reciprocal std per pixel).
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (n, c, h, w) = x.d4();
    let hw = h * w;
    let eps = T::from_f64(LAYER_NORM_EPS);
    let inv_c = T::one() / T::from_f64(c as f64);
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut rstd = vec![T::zero(); n * hw];
    let xd = x.data();
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let mut mean = T::zero();
            for ci in 0..c {
                mean += xd[base + ci * hw + p];
            }
            mean *= inv_c;
            let mut var = T::zero();
            for ci in 0..c {
                let d = xd[base + ci * hw + p] - mean;
                var += d * d;
            }
            var *= inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd[s * hw + p] = r;
            for ci in 0..c {
                let idx = base + ci * hw + p;
                let xh = (xd[idx] - mean) * r;
                xhat.data_mut()[idx] = xh;
                out.data_mut()[idx] = xh * gamma.data()[ci] + beta.data()[ci];
            }
        }
    }
    (out, xhat, rstd)
}

/// Gradients (input, gamma, beta).
pub(crate) fn layer_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    rstd: &[T],
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = xhat.d4();
    let hw = h * w;
    let inv_c = T::one() / T::from_f64(c as f64);
    let mut gx = Tensor::zeros(xhat.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    let xh = xhat.data();
    let gd = gy.data();
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for ci in 0..c {
                let idx = base + ci * hw + p;
                let g = gd[idx] * gamma.data()[ci];
                mean_g += g;
                mean_gx += g * xh[idx];
                gg.data_mut()[ci] += gd[idx] * xh[idx];
                gb.data_mut()[ci] += gd[idx];
            }
            mean_g *= inv_c;
            mean_gx *= inv_c;
            let r = rstd[s * hw + p];
            for ci in 0..c {
                let idx = base + ci * hw + p;
                let g = gd[idx] * gamma.data()[ci];
                gx.data_mut()[idx] = r * (g - mean_g - xh[idx] * mean_gx);
            }
        }
    }
    (gx, gg, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_closed_form() {
        let x = Tensor::<f64>::full(&[5], 2.5);
        let y = softmax_axis(&x, 0).unwrap();
        for v in y.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let x = Tensor::<f64>::from_vec(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let y = softmax_axis(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_along_middle_axis() {
        let x = Tensor::<f64>::from_vec(&[2, 3, 2], (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
        let shifted = x.map(|v| v + 100.0);
        let a = softmax_axis(&x, 1).unwrap();
        let b = softmax_axis(&shifted, 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|k| a.data()[o * 6 + k * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax_axis(&x, 3).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::<f64>::full(&[2], 1.0);
        let zeros = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &ones, &zeros).unwrap();
        let scale = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] + scale).abs() < 1e-15);
        assert!((y.data()[1] - scale).abs() < 1e-15);
        assert!((y.data()[0] + 1.0).abs() < 1e-5);

        let c = Tensor::<f64>::full(&[1, 2, 2, 2], 4.2);
        let y = layer_norm(&c, &ones, &zeros).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_nearly_idempotent() {
        let x = Tensor::<f64>::from_vec(&[1, 4, 1, 2], vec![0.3, -1.0, 2.0, 0.1, 5.0, 4.0, -2.0, 0.5]).unwrap();
        let ones = Tensor::<f64>::full(&[4], 1.0);
        let zeros = Tensor::<f64>::zeros(&[4]);
        let once = layer_norm(&x, &ones, &zeros).unwrap();
        let twice = layer_norm(&once, &ones, &zeros).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-4);
    }
}
