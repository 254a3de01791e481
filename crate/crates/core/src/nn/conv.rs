//! Convolution kernels: 1×1, 3×3 (im2col + gemm) and 3×3 depthwise, all with
//! stride 1 and zero padding 1 for the 3×3 variants.

use crate::error::{reject, Error, Result};
use crate::tensor::{mm, FeatureMap, Scalar, Tensor};

/// Static description of a convolution together with its weights.
#[derive(Clone, Debug)]
pub struct ConvSpec<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub depthwise: bool,
    /// (out, in, k, k), or (C, 1, 3, 3) when depthwise.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        depthwise: bool,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        let geom = ConvGeom::new(in_channels, out_channels, kernel, depthwise)?;
        if weight.shape() != geom.weight_shape().as_slice() {
            return Err(Error::Config(format!(
                "conv weight shape {:?}, expected {:?}",
                weight.shape(),
                geom.weight_shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [out_channels] {
                return Err(Error::Config(format!(
                    "conv bias shape {:?}, expected [{}]",
                    b.shape(),
                    out_channels
                )));
            }
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            depthwise,
            weight,
            bias,
        })
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            depthwise: self.depthwise,
        }
    }
}

/// Shape-only part of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub depthwise: bool,
}

impl ConvGeom {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, depthwise: bool) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("conv channel counts must be positive".into()));
        }
        if kernel != 1 && kernel != 3 {
            return Err(Error::Config(format!("unsupported kernel size {kernel}")));
        }
        if depthwise && (in_channels != out_channels || kernel != 3) {
            return Err(Error::Config(
                "depthwise conv needs kernel 3 and in_channels == out_channels".into(),
            ));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            depthwise,
        })
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        if self.depthwise {
            vec![self.out_channels, 1, 3, 3]
        } else {
            vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
        }
    }

    pub fn fan_in(&self) -> usize {
        if self.depthwise {
            9
        } else {
            self.in_channels * self.kernel * self.kernel
        }
    }
}

/// Standard 2-D convolution.
pub fn conv2d<T: Scalar>(x: &FeatureMap<T>, spec: &ConvSpec<T>) -> Result<FeatureMap<T>> {
    let (_, c, _, _) = x.dims4()?;
    if c != spec.in_channels {
        reject!("conv2d expects {} input channels, got {}", spec.in_channels, c);
    }
    Ok(conv_forward(x, &spec.weight, spec.bias.as_ref(), spec.geom()))
}

/// Unfold a (C, H, W) plane stack into (C·9, H·W) columns, zero padding 1.
pub(crate) fn im2col3x3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col3x3`: accumulate columns back into planes.
pub(crate) fn col2im3x3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += *s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], hw: usize) {
    for (co, b) in bias.iter().enumerate() {
        for v in &mut out[co * hw..(co + 1) * hw] {
            *v += *b;
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Tensor<T> {
    let (n, cin, h, w) = x.d4();
    let hw = h * w;
    let cout = g.out_channels;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let wd = weight.data();
    let mut cols = if g.kernel == 3 && !g.depthwise {
        vec![T::zero(); cin * 9 * hw]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let xs = x.sample(s);
        let os = &mut out.data_mut()[s * cout * hw..(s + 1) * cout * hw];
        if g.depthwise {
            depthwise_forward(xs, wd, cin, h, w, os);
        } else if g.kernel == 1 {
            mm::ab(cout, cin, hw, wd, xs, os, false);
        } else {
            im2col3x3(xs, cin, h, w, &mut cols);
            mm::ab(cout, cin * 9, hw, wd, &cols, os, false);
        }
        if let Some(b) = bias {
            add_bias(os, b.data(), hw);
        }
    }
    out
}

/// Gradients (input, weight, bias) of a convolution.
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeom,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, cin, h, w) = x.d4();
    let hw = h * w;
    let cout = g.out_channels;
    let wd = weight.data();
    let mut gx = want_input.then(|| Tensor::zeros(x.shape()));
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let mut cols = if g.kernel == 3 && !g.depthwise {
        vec![T::zero(); cin * 9 * hw]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let xs = x.sample(s);
        let gs = gout.sample(s);
        for co in 0..cout {
            gb.data_mut()[co] += gs[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        if g.depthwise {
            let gxs = gx
                .as_mut()
                .map(|t| &mut t.data_mut()[s * cin * hw..(s + 1) * cin * hw]);
            depthwise_backward(xs, wd, gs, cin, h, w, gxs, gw.data_mut());
        } else if g.kernel == 1 {
            if want_weight {
                mm::abt(cout, hw, cin, gs, xs, gw.data_mut(), true);
            }
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx.data_mut()[s * cin * hw..(s + 1) * cin * hw];
                mm::atb(cin, cout, hw, wd, gs, gxs, false);
            }
        } else {
            if want_weight {
                im2col3x3(xs, cin, h, w, &mut cols);
                mm::abt(cout, hw, cin * 9, gs, &cols, gw.data_mut(), true);
            }
            if let Some(gx) = gx.as_mut() {
                mm::atb(cin * 9, cout, hw, wd, gs, &mut cols, false);
                let gxs = &mut gx.data_mut()[s * cin * hw..(s + 1) * cin * hw];
                col2im3x3(&cols, cin, h, w, gxs);
            }
        }
    }
    (gx, gw, gb)
}

/// Dot product with eight independent partial sums, which lets the loop
/// vectorize.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut s = lanes.iter().copied().sum::<T>();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// Row range `y` and column range `x` for which `(y + dy, x + dx)` stays
/// inside an `h × w` grid.
fn tap_ranges(h: usize, w: usize, dy: isize, dx: isize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let lo = |d: isize| (-d).max(0) as usize;
    let hi = |n: usize, d: isize| (n as isize - d.max(0)).max(0) as usize;
    (lo(dy)..hi(h, dy), lo(dx)..hi(w, dx))
}

// Taps are visited in row-major order, so every output pixel accumulates its
// nine products in the same order as a direct per-pixel loop.
fn depthwise_forward<T: Scalar>(x: &[T], wd: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        let o = &mut out[ci * hw..(ci + 1) * hw];
        o.iter_mut().for_each(|v| *v = T::zero());
        for tap in 0..9 {
            let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
            let k = wd[ci * 9 + tap];
            let (rows, cols) = tap_ranges(h, w, dy, dx);
            for y in rows {
                let sy = (y as isize + dy) as usize;
                let src = &plane[sy * w + (cols.start as isize + dx) as usize..][..cols.len()];
                let dst = &mut o[y * w + cols.start..][..cols.len()];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += k * *s;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Scalar>(
    x: &[T],
    wd: &[T],
    gout: &[T],
    c: usize,
    h: usize,
    w: usize,
    mut gx: Option<&mut [T]>,
    gw: &mut [T],
) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        let go = &gout[ci * hw..(ci + 1) * hw];
        for tap in 0..9 {
            let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
            let k = wd[ci * 9 + tap];
            let (rows, cols) = tap_ranges(h, w, dy, dx);
            let mut acc = T::zero();
            for y in rows {
                let s0 = ((y as isize + dy) as usize) * w + (cols.start as isize + dx) as usize;
                let g = &go[y * w + cols.start..][..cols.len()];
                acc += dot(g, &plane[s0..s0 + cols.len()]);
                if let Some(gx) = gx.as_deref_mut() {
                    for (d, gv) in gx[ci * hw + s0..][..cols.len()].iter_mut().zip(g) {
                        *d += k * *gv;
                    }
                }
            }
            gw[ci * 9 + tap] += acc;
        }
    }
}
