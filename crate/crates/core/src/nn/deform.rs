//! Bilinear sampling and the offsets-only (v1) deformable 3×3 convolution.
//!
//! Offsets are laid out as 18 channels, `(dy, dx)` for each tap in row-major
//! tap order, shared by all input channels.

use crate::error::{reject, Error, Result};
use crate::nn::conv::{ConvGeom, ConvSpec};
use crate::tensor::{mm, FeatureMap, Scalar, Tensor};

pub const OFFSET_CHANNELS: usize = 18;

/// A 3×3 convolution whose taps are displaced by predicted offsets.
#[derive(Clone, Debug)]
pub struct DeformableConvSpec<T> {
    pub base: ConvSpec<T>,
    pub offset_predictor: ConvSpec<T>,
}

impl<T: Scalar> DeformableConvSpec<T> {
    pub fn new(base: ConvSpec<T>, offset_predictor: ConvSpec<T>) -> Result<Self> {
        if base.kernel != 3 || base.depthwise {
            return Err(Error::Config("deformable conv base must be a dense 3x3 conv".into()));
        }
        if offset_predictor.out_channels != OFFSET_CHANNELS {
            return Err(Error::Config(format!(
                "offset predictor must produce {} channels (2 per tap), got {}",
                OFFSET_CHANNELS, offset_predictor.out_channels
            )));
        }
        if offset_predictor.in_channels != base.in_channels {
            return Err(Error::Config("offset predictor input channels differ from base".into()));
        }
        Ok(Self {
            base,
            offset_predictor,
        })
    }
}

/// Weights and value derivatives of a bilinear sample at `(y, x)`.
struct Bilinear<T> {
    /// (flat index, weight) of the in-grid neighbours.
    taps: [(usize, T); 4],
    n: usize,
    /// d weight / dy and d weight / dx per tap, aligned with `taps`.
    dy: [T; 4],
    dx: [T; 4],
}

#[inline]
fn bilinear<T: Scalar>(y: T, x: T, h: usize, w: usize) -> Bilinear<T> {
    let y0f = y.floor();
    let x0f = x.floor();
    let ly = y - y0f;
    let lx = x - x0f;
    let hy = T::one() - ly;
    let hx = T::one() - lx;
    let y0 = y0f.as_f64() as isize;
    let x0 = x0f.as_f64() as isize;
    let mut out = Bilinear {
        taps: [(0, T::zero()); 4],
        n: 0,
        dy: [T::zero(); 4],
        dx: [T::zero(); 4],
    };
    let corners = [
        (y0, x0, hy * hx, -hx, -hy),
        (y0, x0 + 1, hy * lx, -lx, hy),
        (y0 + 1, x0, ly * hx, hx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    ];
    for (cy, cx, wgt, dwy, dwx) in corners {
        if cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize {
            out.taps[out.n] = (cy as usize * w + cx as usize, wgt);
            out.dy[out.n] = dwy;
            out.dx[out.n] = dwx;
            out.n += 1;
        }
    }
    out
}

#[inline]
fn sample_plane<T: Scalar>(plane: &[T], b: &Bilinear<T>) -> T {
    let mut v = T::zero();
    for &(idx, wgt) in &b.taps[..b.n] {
        v += wgt * plane[idx];
    }
    v
}

/// Bilinearly sample every channel of `x` at `coords` (`(y, x)` pairs, one per
/// output location in row-major order over `out_h × out_w`). Samples outside
/// the grid read zeros.
pub fn bilinear_sample<T: Scalar>(
    x: &FeatureMap<T>,
    coords: &[(T, T)],
    out_h: usize,
    out_w: usize,
) -> Result<FeatureMap<T>> {
    let (n, c, h, w) = x.dims4()?;
    if coords.len() != out_h * out_w {
        reject!(
            "bilinear_sample: {} coordinates for a {}x{} output",
            coords.len(),
            out_h,
            out_w
        );
    }
    let taps: Vec<Bilinear<T>> = coords.iter().map(|&(y, xx)| bilinear(y, xx, h, w)).collect();
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let ohw = out_h * out_w;
    for s in 0..n {
        for ci in 0..c {
            let plane = x.plane(s, ci);
            let o = &mut out.data_mut()[(s * c + ci) * ohw..(s * c + ci + 1) * ohw];
            for (dst, b) in o.iter_mut().zip(&taps) {
                *dst = sample_plane(plane, b);
            }
        }
    }
    Ok(out)
}

/// Deformable 3×3 convolution with zero padding semantics.
pub fn deformable_conv3x3<T: Scalar>(
    x: &FeatureMap<T>,
    spec: &DeformableConvSpec<T>,
) -> Result<FeatureMap<T>> {
    let (_, c, _, _) = x.dims4()?;
    if c != spec.base.in_channels {
        reject!("deformable conv expects {} channels, got {}", spec.base.in_channels, c);
    }
    let offsets = crate::nn::conv::conv2d(x, &spec.offset_predictor)?;
    deform_forward(x, &offsets, &spec.base.weight, spec.base.bias.as_ref())
}

fn sampling_grid<T: Scalar>(off: &[T], h: usize, w: usize) -> Vec<Bilinear<T>> {
    let hw = h * w;
    let mut grid = Vec::with_capacity(9 * hw);
    for t in 0..9 {
        let (ky, kx) = (t / 3, t % 3);
        let dys = &off[(2 * t) * hw..(2 * t + 1) * hw];
        let dxs = &off[(2 * t + 1) * hw..(2 * t + 2) * hw];
        for y in 0..h {
            for xx in 0..w {
                let p = y * w + xx;
                let sy = T::from_f64(y as f64 + ky as f64 - 1.0) + dys[p];
                let sx = T::from_f64(xx as f64 + kx as f64 - 1.0) + dxs[p];
                grid.push(bilinear(sy, sx, h, w));
            }
        }
    }
    grid
}

fn deform_cols<T: Scalar>(xs: &[T], grid: &[Bilinear<T>], c: usize, hw: usize, cols: &mut [T]) {
    for ci in 0..c {
        let plane = &xs[ci * hw..(ci + 1) * hw];
        for t in 0..9 {
            let row = &mut cols[(ci * 9 + t) * hw..(ci * 9 + t + 1) * hw];
            let g = &grid[t * hw..(t + 1) * hw];
            for (dst, b) in row.iter_mut().zip(g) {
                *dst = sample_plane(plane, b);
            }
        }
    }
}

/// Forward pass given explicit offsets (N, 18, H, W).
pub(crate) fn deform_forward<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (on, oc, oh, ow) = offsets.dims4()?;
    if oc != OFFSET_CHANNELS {
        return Err(Error::Config(format!(
            "deformable conv needs {OFFSET_CHANNELS} offset channels, got {oc}"
        )));
    }
    if (on, oh, ow) != (n, h, w) {
        reject!("offset map shape {:?} does not match input {:?}", offsets.shape(), x.shape());
    }
    let g = ConvGeom::new(c, weight.shape()[0], 3, false)?;
    if weight.shape() != g.weight_shape().as_slice() {
        return Err(Error::Config("deformable conv weight shape mismatch".into()));
    }
    let hw = h * w;
    let cout = g.out_channels;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let mut cols = vec![T::zero(); c * 9 * hw];
    for s in 0..n {
        let grid = sampling_grid(offsets.sample(s), h, w);
        deform_cols(x.sample(s), &grid, c, hw, &mut cols);
        let os = &mut out.data_mut()[s * cout * hw..(s + 1) * cout * hw];
        mm::ab(cout, c * 9, hw, weight.data(), &cols, os, false);
        if let Some(b) = bias {
            for (co, bv) in b.data().iter().enumerate() {
                for v in &mut os[co * hw..(co + 1) * hw] {
                    *v += *bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients (input, offsets, weight, bias).
pub(crate) fn deform_backward<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.d4();
    let hw = h * w;
    let cout = weight.shape()[0];
    let mut gx = Tensor::zeros(x.shape());
    let mut goff = Tensor::zeros(offsets.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let mut cols = vec![T::zero(); c * 9 * hw];
    let mut gcols = vec![T::zero(); c * 9 * hw];
    for s in 0..n {
        let xs = x.sample(s);
        let gs = gout.sample(s);
        let grid = sampling_grid(offsets.sample(s), h, w);
        deform_cols(xs, &grid, c, hw, &mut cols);
        mm::abt(cout, hw, c * 9, gs, &cols, gw.data_mut(), true);
        for co in 0..cout {
            gb.data_mut()[co] += gs[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        mm::atb(c * 9, cout, hw, weight.data(), gs, &mut gcols, false);

        let gxs = &mut gx.data_mut()[s * c * hw..(s + 1) * c * hw];
        let goffs = &mut goff.data_mut()[s * OFFSET_CHANNELS * hw..(s + 1) * OFFSET_CHANNELS * hw];
        for ci in 0..c {
            let plane = &xs[ci * hw..(ci + 1) * hw];
            for t in 0..9 {
                let grow = &gcols[(ci * 9 + t) * hw..(ci * 9 + t + 1) * hw];
                let g = &grid[t * hw..(t + 1) * hw];
                for p in 0..hw {
                    let gv = grow[p];
                    let b = &g[p];
                    let mut dy = T::zero();
                    let mut dx = T::zero();
                    for k in 0..b.n {
                        let (idx, wgt) = b.taps[k];
                        gxs[ci * hw + idx] += gv * wgt;
                        dy += b.dy[k] * plane[idx];
                        dx += b.dx[k] * plane[idx];
                    }
                    goffs[(2 * t) * hw + p] += gv * dy;
                    goffs[(2 * t + 1) * hw + p] += gv * dx;
                }
            }
        }
    }
    (gx, goff, gw, gb)
}
