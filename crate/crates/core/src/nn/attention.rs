//! Multi-head channel attention: per head, an (d × d) attention matrix over
//! token channels, with pixels as the contraction axis.

use crate::error::{reject, Error, Result};
use crate::nn::norm::{softmax_backward, softmax_forward};
use crate::tensor::{mm, Scalar, Tensor};

/// Shape of a token set: (heads, d_head, pixels) per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub heads: usize,
    pub d_head: usize,
    pub pixels: usize,
}

impl HeadLayout {
    pub fn new(channels: usize, heads: usize, pixels: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "token dimension {channels} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            d_head: channels / heads,
            pixels,
        })
    }
}

/// Result of the forward pass; `attn` holds every head's (d × d) matrix,
/// shape (N, heads, d, d).
pub struct AttentionOutput<T> {
    pub out: Tensor<T>,
    pub attn: Tensor<T>,
}

/// `softmax(Q Kᵀ / √d) V` per head. Q, K, V are (N, m, H, W).
pub fn channel_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<AttentionOutput<T>> {
    let (n, m, h, w) = q.dims4()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        reject!(
            "attention operand shapes differ: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        );
    }
    let lay = HeadLayout::new(m, heads, h * w)?;
    let d = lay.d_head;
    let p = lay.pixels;
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut logits = Tensor::zeros(&[n, heads, d, d]);
    for s in 0..n {
        for hd in 0..heads {
            let off = (s * m + hd * d) * p;
            let qh = &q.data()[off..off + d * p];
            let kh = &k.data()[off..off + d * p];
            let l = &mut logits.data_mut()[(s * heads + hd) * d * d..(s * heads + hd + 1) * d * d];
            mm::abt(d, p, d, qh, kh, l, false);
            for x in l.iter_mut() {
                *x *= scale;
            }
        }
    }
    let attn = softmax_forward(&logits, 3);
    let mut out = Tensor::zeros(q.shape());
    for s in 0..n {
        for hd in 0..heads {
            let off = (s * m + hd * d) * p;
            let a = &attn.data()[(s * heads + hd) * d * d..(s * heads + hd + 1) * d * d];
            let vh = &v.data()[off..off + d * p];
            mm::ab(d, d, p, a, vh, &mut out.data_mut()[off..off + d * p], false);
        }
    }
    Ok(AttentionOutput { out, attn })
}

/// Gradients (Q, K, V) given the saved attention matrices.
pub(crate) fn channel_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    attn: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, m, h, w) = q.d4();
    let heads = attn.shape()[1];
    let d = m / heads;
    let p = h * w;
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(q.shape());
    let mut gv = Tensor::zeros(q.shape());
    let mut ga = Tensor::zeros(attn.shape());
    for s in 0..n {
        for hd in 0..heads {
            let off = (s * m + hd * d) * p;
            let aoff = (s * heads + hd) * d * d;
            let go = &gout.data()[off..off + d * p];
            let a = &attn.data()[aoff..aoff + d * d];
            // dA = dOut · Vᵀ ; dV = Aᵀ · dOut
            mm::abt(d, p, d, go, &v.data()[off..off + d * p], &mut ga.data_mut()[aoff..aoff + d * d], false);
            mm::atb(d, d, p, a, go, &mut gv.data_mut()[off..off + d * p], false);
        }
    }
    let mut gl = softmax_backward(attn, &ga, 3);
    for x in gl.data_mut() {
        *x *= scale;
    }
    for s in 0..n {
        for hd in 0..heads {
            let off = (s * m + hd * d) * p;
            let aoff = (s * heads + hd) * d * d;
            let g = &gl.data()[aoff..aoff + d * d];
            // logits = Q Kᵀ: dQ = dL · K ; dK = dLᵀ · Q
            mm::ab(d, d, p, g, &k.data()[off..off + d * p], &mut gq.data_mut()[off..off + d * p], false);
            mm::atb(d, d, p, g, &q.data()[off..off + d * p], &mut gk.data_mut()[off..off + d * p], false);
        }
    }
    (gq, gk, gv)
}
