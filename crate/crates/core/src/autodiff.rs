//! A small reverse-mode tape covering the operations the networks in this
//! crate need. Every forward pass builds a fresh [`Graph`]; parameters enter
//! as leaves bound to a [`ParamStore`] slot so their gradients can be
//! collected after [`Graph::backward`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{reject, Error, Result};
use crate::metrics::{ssim_backward, ssim_forward, SsimCache};
use crate::nn::attention::{channel_attention, channel_attention_backward};
use crate::nn::conv::{conv_backward, conv_forward, ConvGeom};
use crate::nn::deform::{deform_backward, deform_forward};
use crate::nn::norm::{layer_norm_backward, layer_norm_forward, softmax_backward, softmax_forward};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{mm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Code lookup shared by the quantizer ops: flat codebook (entries × n_z)
/// plus the per-band base offset into it.
#[derive(Clone, Debug)]
pub struct CodeTable<T> {
    pub codes: Arc<Tensor<T>>,
    pub band_offsets: Vec<usize>,
    /// Number of rows addressable from each band.
    pub rows_per_band: usize,
    pub n_z: usize,
}

impl<T: Scalar> CodeTable<T> {
    #[inline]
    pub fn code(&self, band: usize, index: usize) -> &[T] {
        let row = self.band_offsets[band] + index;
        &self.codes.data()[row * self.n_z..(row + 1) * self.n_z]
    }

    #[inline]
    pub fn row(&self, band: usize, index: usize) -> usize {
        self.band_offsets[band] + index
    }

    pub fn bands(&self) -> usize {
        self.band_offsets.len()
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Deform {
        x: Var,
        off: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Gelu(Var),
    Abs(Var),
    MaskPixels {
        x: Var,
        mask: Arc<[T]>,
    },
    Gather {
        x: Var,
        maps: Arc<[Vec<usize>]>,
    },
    SumPixels(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    MulPlane {
        x: Var,
        g: Var,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        attn: Tensor<T>,
    },
    QuantizeSt {
        z: Var,
        bands: usize,
    },
    CodeProject {
        z: Var,
        w: Var,
        b: Var,
        indices: Arc<[u32]>,
        table: CodeTable<T>,
    },
    VqLoss {
        z: Var,
        book: Var,
        indices: Arc<[u32]>,
        table: CodeTable<T>,
        beta: T,
    },
    L1 {
        a: Var,
        b: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Ssim {
        a: Var,
        b: Var,
        cache: Box<SsimCache<T>>,
    },
    Mean(Var),
    DotConst {
        x: Var,
        r: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf. `requires_grad` leaves receive gradients in `backward`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a stored parameter; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone(), store.is_trainable(id));
        self.bound.insert(id, v);
        v
    }

    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(p, v)| (*p, *v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<Var> {
        if let Some(i) = self.nodes[v.0].value.first_non_finite() {
            return Err(Error::NonFinite {
                context: what.to_string(),
                detail: format!("element {i} of tensor {:?}", self.shape(v)),
            });
        }
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            reject!("{what}: shape {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xv = self.value(x);
        let (_, c, _, _) = xv.dims4()?;
        if c != geom.in_channels {
            reject!("conv expects {} input channels, got {}", geom.in_channels, c);
        }
        if self.shape(w) != geom.weight_shape().as_slice() {
            return Err(Error::Config(format!(
                "conv weight shape {:?}, expected {:?}",
                self.shape(w),
                geom.weight_shape()
            )));
        }
        let out = conv_forward(xv, self.value(w), b.map(|b| self.value(b)), geom);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &parents))
    }

    pub fn deform_conv(&mut self, x: Var, off: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = deform_forward(self.value(x), self.value(off), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, off, w];
        parents.extend(b);
        Ok(self.push(out, Op::Deform { x, off, w, b }, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| v * scale + shift);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        // 0.5·(1 + tanh(u)) written as the logistic function of 2u
        let two = T::from_f64(2.0);
        let out = self
            .value(x)
            .map(|v| v / (T::one() + (-two * c * (v + a * v * v * v)).exp()));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    /// Multiply every (H, W) plane by a constant pixel mask.
    pub fn mask_pixels(&mut self, x: Var, mask: Arc<[T]>) -> Result<Var> {
        let xv = self.value(x);
        let (_, _, h, w) = xv.dims4()?;
        if mask.len() != h * w {
            reject!("mask has {} pixels, feature map has {}", mask.len(), h * w);
        }
        let hw = h * w;
        let mut out = xv.clone();
        for plane in out.data_mut().chunks_mut(hw) {
            plane.iter_mut().zip(mask.iter()).for_each(|(v, m)| *v *= *m);
        }
        Ok(self.push(out, Op::MaskPixels { x, mask }, &[x]))
    }

    /// Per-sample pixel gather: `y[n, c, p] = x[n, c, maps[n][p]]`.
    pub fn gather_pixels(&mut self, x: Var, maps: Arc<[Vec<usize>]>) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let hw = h * w;
        if maps.len() != n || maps.iter().any(|m| m.len() != hw) {
            reject!("pixel gather maps do not match a {}x{}x{} batch", n, h, w);
        }
        let mut out = Tensor::zeros(xv.shape());
        for s in 0..n {
            let map = &maps[s];
            for ci in 0..c {
                let src = xv.plane(s, ci);
                let off = (s * c + ci) * hw;
                let dst = &mut out.data_mut()[off..off + hw];
                for (d, &m) in dst.iter_mut().zip(map) {
                    *d = src[m];
                }
            }
        }
        Ok(self.push(out, Op::Gather { x, maps }, &[x]))
    }

    /// (N, C, H, W) → (N, C) spatial sums.
    pub fn sum_pixels(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let hw = h * w;
        let data = xv.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(out, Op::SumPixels(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(x).rank() {
            reject!("softmax axis {axis} out of range");
        }
        let out = softmax_forward(self.value(x), axis);
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// (N, B) ⊙ (B) broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        if xv.rank() != 2 || rv.numel() != xv.shape()[1] {
            reject!("mul_row: {:?} by {:?}", xv.shape(), rv.shape());
        }
        let b = rv.numel();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= rv.data()[i % b];
        }
        Ok(self.push(out, Op::MulRow { x, row }, &[x, row]))
    }

    /// (N, C, H, W) scaled per (sample, channel) by an (N, C) tensor.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if self.shape(s) != [n, c] {
            reject!("scale_channels: {:?} by {:?}", xv.shape(), self.shape(s));
        }
        let hw = h * w;
        let sv = self.value(s);
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let k = sv.data()[i];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(out, Op::ScaleChannels { x, s }, &[x, s]))
    }

    /// (N, C, H, W) times a single-channel (N, 1, H, W) map.
    pub fn mul_plane(&mut self, x: Var, g: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if self.shape(g) != [n, 1, h, w] {
            reject!("mul_plane: {:?} by {:?}", xv.shape(), self.shape(g));
        }
        let hw = h * w;
        let gv = self.value(g);
        let mut out = xv.clone();
        for s in 0..n {
            let gp = &gv.data()[s * hw..(s + 1) * hw];
            for ci in 0..c {
                let off = (s * c + ci) * hw;
                for (v, k) in out.data_mut()[off..off + hw].iter_mut().zip(gp) {
                    *v *= *k;
                }
            }
        }
        Ok(self.push(out, Op::MulPlane { x, g }, &[x, g]))
    }

    /// Channel concatenation of rank-4 tensors with matching N, H, W.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            reject!("concat of nothing");
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total = 0;
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                reject!("concat: mismatched shapes");
            }
            total += xc;
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for s in 0..n {
            let mut c0 = 0;
            for &x in xs {
                let xv = self.value(x);
                let xc = xv.shape()[1];
                let dst = (s * total + c0) * hw;
                out.data_mut()[dst..dst + xc * hw].copy_from_slice(xv.sample(s));
                c0 += xc;
            }
        }
        Ok(self.push(out, Op::Concat(xs.to_vec()), xs))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if len == 0 || start + len > c {
            reject!("slice [{start}, {}) out of {c} channels", start + len);
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, len, h, w]);
        for s in 0..n {
            let src = (s * c + start) * hw;
            out.data_mut()[s * len * hw..(s + 1) * len * hw].copy_from_slice(&xv.data()[src..src + len * hw]);
        }
        Ok(self.push(out, Op::Slice { x, start }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            reject!("layer norm affine does not match {c} channels");
        }
        let (out, xhat, rstd) = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta));
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head channel attention; also returns the attention matrices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Tensor<T>)> {
        let r = channel_attention(self.value(q), self.value(k), self.value(v), heads)?;
        let attn = r.attn.clone();
        let out = self.push(r.out, Op::Attention { q, k, v, attn: r.attn }, &[q, k, v]);
        Ok((out, attn))
    }

    /// Straight-through quantizer: forward value is `quantized`
    /// (N, B·n_z, H, W), the backward pass copies gradients to `z`
    /// (N, n_z, H, W), summed over bands.
    pub fn quantize_st(&mut self, z: Var, quantized: Tensor<T>) -> Result<Var> {
        let (n, nz, h, w) = self.value(z).dims4()?;
        let (qn, qc, qh, qw) = quantized.dims4()?;
        if (qn, qh, qw) != (n, h, w) || qc % nz != 0 {
            reject!("quantized tensor {:?} incompatible with {:?}", quantized.shape(), self.shape(z));
        }
        Ok(self.push(quantized, Op::QuantizeSt { z, bands: qc / nz }, &[z]))
    }

    /// Fused `conv1x1(st_quantize(z))`: projects the selected codes of every
    /// band through `w` (hidden, B·n_z, 1, 1) without materializing the
    /// concatenated quantized tensor. Gradients reach `z` straight-through.
    pub fn code_project(
        &mut self,
        z: Var,
        w: Var,
        b: Var,
        indices: Arc<[u32]>,
        table: CodeTable<T>,
    ) -> Result<Var> {
        let (n, nz, h, wd) = self.value(z).dims4()?;
        let bands = table.bands();
        let hw = h * wd;
        let wv = self.value(w);
        let hidden = wv.shape()[0];
        if wv.shape() != [hidden, bands * nz, 1, 1] || table.n_z != nz {
            return Err(Error::Config(format!(
                "code projection weight {:?} incompatible with {} bands of {} dims",
                wv.shape(),
                bands,
                nz
            )));
        }
        if indices.len() != n * bands * hw {
            reject!("code projection: {} indices for {} slots", indices.len(), n * bands * hw);
        }
        // Per band: (rows × n_z) codes times the band's slice of Wᵀ.
        let count = table.rows_per_band;
        let mut proj = Vec::with_capacity(bands);
        for band in 0..bands {
            let base = table.band_offsets[band];
            let codes = &table.codes.data()[base * nz..(base + count) * nz];
            let mut p = vec![T::zero(); count * hidden];
            T::gemm(
                count,
                nz,
                hidden,
                codes,
                nz as isize,
                1,
                &wv.data()[band * nz..],
                1,
                (bands * nz) as isize,
                T::zero(),
                &mut p,
                hidden as isize,
                1,
            );
            proj.push(p);
        }
        let bias = self.value(b).data().to_vec();
        let mut out = Tensor::zeros(&[n, hidden, h, wd]);
        let mut acc = vec![T::zero(); hidden];
        for s in 0..n {
            let od = &mut out.data_mut()[s * hidden * hw..(s + 1) * hidden * hw];
            for p in 0..hw {
                acc.copy_from_slice(&bias);
                for (band, pb) in proj.iter().enumerate() {
                    let idx = indices[(s * bands + band) * hw + p] as usize;
                    for (a, v) in acc.iter_mut().zip(&pb[idx * hidden..(idx + 1) * hidden]) {
                        *a += *v;
                    }
                }
                for (o, a) in acc.iter().enumerate() {
                    od[o * hw + p] = *a;
                }
            }
        }
        Ok(self.push(
            out,
            Op::CodeProject {
                z,
                w,
                b,
                indices,
                table,
            },
            &[z, w, b],
        ))
    }

    /// Codebook term plus `beta` × commitment term, each the mean squared
    /// distance between `z` and its selected codes over all bands.
    pub fn vq_loss(
        &mut self,
        z: Var,
        book: Var,
        indices: Arc<[u32]>,
        table: CodeTable<T>,
        beta: T,
    ) -> Result<Var> {
        let (n, nz, h, w) = self.value(z).dims4()?;
        let bands = table.bands();
        let hw = h * w;
        if indices.len() != n * bands * hw {
            reject!("vq loss: index count mismatch");
        }
        let zv = self.value(z);
        let mut sq = T::zero();
        for s in 0..n {
            for band in 0..bands {
                for p in 0..hw {
                    let code = table.code(band, indices[(s * bands + band) * hw + p] as usize);
                    for (j, c) in code.iter().enumerate() {
                        let d = zv.data()[(s * nz + j) * hw + p] - *c;
                        sq += d * d;
                    }
                }
            }
        }
        let count = T::from_f64((n * bands * hw * nz) as f64);
        let mean = sq / count;
        let out = Tensor::scalar(mean + beta * mean);
        Ok(self.push(
            out,
            Op::VqLoss {
                z,
                book,
                indices,
                table,
                beta,
            },
            &[z, book],
        ))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let av = self.value(a);
        let bv = self.value(b);
        let s: T = av.data().iter().zip(bv.data()).map(|(x, y)| (*x - *y).abs()).sum();
        let out = Tensor::scalar(s / T::from_f64(av.numel() as f64));
        Ok(self.push(out, Op::L1 { a, b }, &[a, b]))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let av = self.value(a);
        let bv = self.value(b);
        let s: T = av.data().iter().zip(bv.data()).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
        let out = Tensor::scalar(s / T::from_f64(av.numel() as f64));
        Ok(self.push(out, Op::Mse { a, b }, &[a, b]))
    }

    /// Mean SSIM over all planes (11×11 Gaussian window, σ = 1.5).
    pub fn ssim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "ssim")?;
        let (value, cache) = ssim_forward(self.value(a), self.value(b), T::one())?;
        let out = Tensor::scalar(value);
        Ok(self.push(
            out,
            Op::Ssim {
                a,
                b,
                cache: Box::new(cache),
            },
            &[a, b],
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / T::from_f64(xv.numel() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// `Σ x ⊙ r` for a constant tensor `r`.
    pub fn dot_const(&mut self, x: Var, r: Tensor<T>) -> Result<Var> {
        if self.shape(x) != r.shape() {
            reject!("dot_const: {:?} vs {:?}", self.shape(x), r.shape());
        }
        let s: T = self.value(x).data().iter().zip(r.data()).map(|(a, b)| *a * *b).sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, r }, &[x]))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        self.check_finite(out, "loss")?;
        if self.value(out).numel() != 1 {
            reject!("backward needs a scalar output, got {:?}", self.shape(out));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), T::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (gx, gw, gb) = conv_backward(self.value(*x), self.value(*w), g, *geom, self.wants(*x), self.wants(*w));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::Deform { x, off, w, b } => {
                let (gx, goff, gw, gb) = deform_backward(self.value(*x), self.value(*off), self.value(*w), g);
                acc(*x, gx);
                acc(*off, goff);
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(g, self.value(*b), |x, y| x * y));
                acc(*b, zip(g, self.value(*a), |x, y| x * y));
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * *scale)),
            Op::Gelu(x) => {
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let three = T::from_f64(3.0);
                let two = T::from_f64(2.0);
                let d = zip(g, self.value(*x), |gv, v| {
                    let s = T::one() / (T::one() + (-two * c * (v + a * v * v * v)).exp());
                    let du = c * (T::one() + three * a * v * v);
                    gv * (s + two * v * s * (T::one() - s) * du)
                });
                acc(*x, d);
            }
            Op::Abs(x) => {
                let d = zip(g, self.value(*x), |gv, v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                acc(*x, d);
            }
            Op::MaskPixels { x, mask } => {
                let mut d = g.clone();
                for plane in d.data_mut().chunks_mut(mask.len()) {
                    plane.iter_mut().zip(mask.iter()).for_each(|(v, m)| *v *= *m);
                }
                acc(*x, d);
            }
            Op::Gather { x, maps } => {
                let (n, c, h, w) = g.d4();
                let hw = h * w;
                let mut d = Tensor::zeros(g.shape());
                for s in 0..n {
                    for ci in 0..c {
                        let off = (s * c + ci) * hw;
                        let src = &g.data()[off..off + hw];
                        let dst = &mut d.data_mut()[off..off + hw];
                        for (p, &m) in maps[s].iter().enumerate() {
                            dst[m] += src[p];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::SumPixels(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.d4();
                let hw = h * w;
                let mut d = Tensor::zeros(xv.shape());
                for (k, chunk) in d.data_mut().chunks_mut(hw).enumerate() {
                    chunk.fill(g.data()[k]);
                }
                acc(*x, d);
            }
            Op::Softmax { x, axis } => acc(*x, softmax_backward(&node.value, g, *axis)),
            Op::MulRow { x, row } => {
                let xv = self.value(*x);
                let rv = self.value(*row);
                let b = rv.numel();
                let mut gx = g.clone();
                for (k, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= rv.data()[k % b];
                }
                let mut gr = Tensor::zeros(rv.shape());
                for (k, (gv, xv)) in g.data().iter().zip(xv.data()).enumerate() {
                    gr.data_mut()[k % b] += *gv * *xv;
                }
                acc(*x, gx);
                acc(*row, gr);
            }
            Op::ScaleChannels { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let (_, _, h, w) = xv.d4();
                let hw = h * w;
                let mut gx = g.clone();
                let mut gs = Tensor::zeros(sv.shape());
                for (k, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                    let xs = &xv.data()[k * hw..(k + 1) * hw];
                    gs.data_mut()[k] = chunk.iter().zip(xs).map(|(a, b)| *a * *b).sum();
                    let f = sv.data()[k];
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                acc(*x, gx);
                acc(*s, gs);
            }
            Op::MulPlane { x, g: gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let (n, c, h, w) = xv.d4();
                let hw = h * w;
                let mut gx = g.clone();
                let mut gg = Tensor::zeros(gv.shape());
                for s in 0..n {
                    for ci in 0..c {
                        let off = (s * c + ci) * hw;
                        for p in 0..hw {
                            gg.data_mut()[s * hw + p] += g.data()[off + p] * xv.data()[off + p];
                            gx.data_mut()[off + p] *= gv.data()[s * hw + p];
                        }
                    }
                }
                acc(*x, gx);
                acc(*gate, gg);
            }
            Op::Concat(xs) => {
                let (n, total, h, w) = g.d4();
                let hw = h * w;
                let mut c0 = 0;
                for &x in xs {
                    let xc = self.shape(x)[1];
                    let mut d = Tensor::zeros(self.shape(x));
                    for s in 0..n {
                        let src = (s * total + c0) * hw;
                        d.data_mut()[s * xc * hw..(s + 1) * xc * hw]
                            .copy_from_slice(&g.data()[src..src + xc * hw]);
                    }
                    acc(x, d);
                    c0 += xc;
                }
            }
            Op::Slice { x, start } => {
                let (n, c, h, w) = self.value(*x).d4();
                let len = g.shape()[1];
                let hw = h * w;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for s in 0..n {
                    let dst = (s * c + start) * hw;
                    d.data_mut()[dst..dst + len * hw].copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
                }
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (gx, gg, gb) = layer_norm_backward(xhat, rstd, self.value(*gamma), g);
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::Attention { q, k, v, attn } => {
                let (gq, gk, gv) =
                    channel_attention_backward(self.value(*q), self.value(*k), self.value(*v), attn, g);
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::QuantizeSt { z, bands } => {
                let (n, nz, h, w) = self.value(*z).d4();
                let hw = h * w;
                let mut d = Tensor::zeros(&[n, nz, h, w]);
                for s in 0..n {
                    for band in 0..*bands {
                        for j in 0..nz {
                            let src = ((s * bands + band) * nz + j) * hw;
                            let dst = (s * nz + j) * hw;
                            for p in 0..hw {
                                d.data_mut()[dst + p] += g.data()[src + p];
                            }
                        }
                    }
                }
                acc(*z, d);
            }
            Op::CodeProject {
                z,
                w,
                b,
                indices,
                table,
            } => {
                let (n, nz, h, wd) = self.value(*z).d4();
                let hw = h * wd;
                let bands = table.bands();
                let wv = self.value(*w);
                let hidden = wv.shape()[0];
                let cin = bands * nz;
                // Straight-through: gz = (Σ_b W_b)ᵀ · g
                if self.wants(*z) {
                    let mut wsum = vec![T::zero(); hidden * nz];
                    for o in 0..hidden {
                        for band in 0..bands {
                            for j in 0..nz {
                                wsum[o * nz + j] += wv.data()[o * cin + band * nz + j];
                            }
                        }
                    }
                    let mut gz = Tensor::zeros(&[n, nz, h, wd]);
                    for s in 0..n {
                        mm::atb(
                            nz,
                            hidden,
                            hw,
                            &wsum,
                            g.sample(s),
                            &mut gz.data_mut()[s * nz * hw..(s + 1) * nz * hw],
                            false,
                        );
                    }
                    acc(*z, gz);
                }
                if self.wants(*w) {
                    let rows = table.codes.shape()[0];
                    let mut gw = Tensor::zeros(wv.shape());
                    // per band: G[row, o] = Σ_{pixels selecting row} g[o, p]
                    for band in 0..bands {
                        let mut per_row = vec![T::zero(); rows * hidden];
                        let mut used = vec![false; rows];
                        for s in 0..n {
                            let gs = g.sample(s);
                            for p in 0..hw {
                                let r = table.row(band, indices[(s * bands + band) * hw + p] as usize);
                                used[r] = true;
                                for o in 0..hidden {
                                    per_row[r * hidden + o] += gs[o * hw + p];
                                }
                            }
                        }
                        for r in (0..rows).filter(|&r| used[r]) {
                            let code = &table.codes.data()[r * nz..(r + 1) * nz];
                            for o in 0..hidden {
                                let go = per_row[r * hidden + o];
                                let dst = &mut gw.data_mut()[o * cin + band * nz..o * cin + band * nz + nz];
                                for (d, c) in dst.iter_mut().zip(code) {
                                    *d += go * *c;
                                }
                            }
                        }
                    }
                    acc(*w, gw);
                }
                let mut gb = Tensor::zeros(&[hidden]);
                for s in 0..n {
                    let gs = g.sample(s);
                    for o in 0..hidden {
                        gb.data_mut()[o] += gs[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                acc(*b, gb);
            }
            Op::VqLoss {
                z,
                book,
                indices,
                table,
                beta,
            } => {
                let zv = self.value(*z);
                let (n, nz, h, w) = zv.d4();
                let hw = h * w;
                let bands = table.bands();
                let count = T::from_f64((n * bands * hw * nz) as f64);
                let two = T::from_f64(2.0);
                let scale = g.data()[0] * two / count;
                let mut gz = Tensor::zeros(zv.shape());
                let mut gbook = Tensor::zeros(self.shape(*book));
                for s in 0..n {
                    for band in 0..bands {
                        for p in 0..hw {
                            let r = table.row(band, indices[(s * bands + band) * hw + p] as usize);
                            for j in 0..nz {
                                let zi = (s * nz + j) * hw + p;
                                let d = zv.data()[zi] - table.codes.data()[r * nz + j];
                                gz.data_mut()[zi] += *beta * scale * d;
                                gbook.data_mut()[r * nz + j] -= scale * d;
                            }
                        }
                    }
                }
                acc(*z, gz);
                acc(*book, gbook);
            }
            Op::L1 { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = g.data()[0] / T::from_f64(av.numel() as f64);
                let d = zip(av, bv, |x, y| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        T::zero()
                    }
                });
                acc(*b, d.map(|v| -v));
                acc(*a, d);
            }
            Op::Mse { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = g.data()[0] * T::from_f64(2.0) / T::from_f64(av.numel() as f64);
                let d = zip(av, bv, |x, y| k * (x - y));
                acc(*b, d.map(|v| -v));
                acc(*a, d);
            }
            Op::Ssim { a, b, cache } => {
                let (ga, gb) = ssim_backward(self.value(*a), self.value(*b), cache, g.data()[0]);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let k = g.data()[0] / T::from_f64(xv.numel() as f64);
                acc(*x, Tensor::full(xv.shape(), k));
            }
            Op::DotConst { x, r } => {
                let k = g.data()[0];
                acc(*x, r.map(|v| v * k));
            }
        }
        Ok(())
    }

    /// Scalar value of a rank-0/size-1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip of equal shapes")
}
