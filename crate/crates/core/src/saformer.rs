//! The spectrum-aware transformer block.
//!
//! A block receives RGB features `F` and the re-scaled spectrum `S`, both in
//! sorted pixel order. It splits them along the anti-diagonal, projects each
//! region separately to queries (from `S`) and keys/values (from `F`), runs
//! channel attention per region, and sums the regions. The result is moved
//! back to original pixel order and gated against a deformable-conv view of
//! the block input before being sorted again for the next block.
//!
//! Triangular regions are represented by zero-filling the full grid. Zero
//! pixels add nothing to `Q Kᵀ`, so this equals attending over the region's
//! pixels only. The depthwise conv sees the zero halo at the region border.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::attention::HeadLayout;
use crate::nn::conv::ConvGeom;
use crate::params::{Conv, DeformConv, LayerNorm, ParamStore};
use crate::refine::{permute_var, DiagonalMask, Direction, SortPermutation};
use crate::tensor::{Scalar, Tensor};

/// Which domain feeds queries, keys and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    /// Queries from the spectrum, keys and values from RGB features.
    Dual,
    /// Everything from RGB features; no spectrum is used.
    RgbStream,
    /// Queries, keys and values all from the spectrum.
    SpectrumStream,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SaformerConfig {
    pub channels: usize,
    pub spectrum_channels: usize,
    pub heads: usize,
    /// Region-separated tokenization; off means whole-grid tokens.
    pub dst: bool,
    /// Spectrum-guided queries; off means queries from RGB features.
    pub cg_msa: bool,
    /// Contextual gating; off means the block returns the attention sum.
    pub cc_ffn: bool,
    pub stream: Stream,
    pub share_region_weights: bool,
}

impl SaformerConfig {
    /// Whether the block consumes a spectrum at all.
    pub fn uses_spectrum(&self) -> bool {
        match self.stream {
            Stream::Dual => self.cg_msa,
            Stream::RgbStream => false,
            Stream::SpectrumStream => true,
        }
    }

    fn sources(&self) -> (Source, Source) {
        match self.stream {
            Stream::Dual if self.cg_msa => (Source::Spectrum, Source::Rgb),
            Stream::Dual | Stream::RgbStream => (Source::Rgb, Source::Rgb),
            Stream::SpectrumStream => (Source::Spectrum, Source::Spectrum),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Rgb,
    Spectrum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    TopLeft,
    BottomRight,
    Whole,
}

/// Pixel order of a feature map flowing through the network.
#[derive(Clone, Debug)]
pub enum PixelOrder {
    Original,
    Sorted(Arc<Vec<SortPermutation>>),
}

/// A graph variable tagged with its pixel order.
#[derive(Clone, Debug)]
pub struct Ordered {
    pub var: Var,
    pub order: PixelOrder,
}

impl Ordered {
    pub fn original(var: Var) -> Self {
        Self {
            var,
            order: PixelOrder::Original,
        }
    }

    pub fn sorted(var: Var, perms: Arc<Vec<SortPermutation>>) -> Self {
        Self {
            var,
            order: PixelOrder::Sorted(perms),
        }
    }

    fn perms(&self, what: &str) -> Result<&Arc<Vec<SortPermutation>>> {
        match &self.order {
            PixelOrder::Sorted(p) => Ok(p),
            PixelOrder::Original => Err(Error::Contract(format!(
                "{what} must be in sorted pixel order, got original order"
            ))),
        }
    }
}

/// 1×1 conv (no bias) followed by a 3×3 depthwise conv (no bias), applied
/// to a region-masked input and masked again.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub pointwise: Conv,
    pub depthwise: Conv,
}

impl Projection {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            pointwise: Conv::new(store, &format!("{name}.pw"), ConvGeom::new(cin, cout, 1, false)?, false, rng)?,
            depthwise: Conv::new(store, &format!("{name}.dw"), ConvGeom::new(cout, cout, 3, true)?, false, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: Option<&Arc<[T]>>,
    ) -> Result<Var> {
        let mut h = match mask {
            Some(m) => g.mask_pixels(x, m.clone())?,
            None => x,
        };
        h = self.pointwise.forward(g, store, h)?;
        h = self.depthwise.forward(g, store, h)?;
        match mask {
            Some(m) => g.mask_pixels(h, m.clone()),
            None => Ok(h),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RegionProjections {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
}

/// Deformable local branch plus the 2-way fusion gate.
#[derive(Clone, Copy, Debug)]
pub struct CcFfn {
    pub local: DeformConv,
    pub fuse: Conv,
}

impl CcFfn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            local: DeformConv::new(store, &format!("{name}.local"), channels, channels, rng)?,
            fuse: Conv::zeros(store, &format!("{name}.fuse"), ConvGeom::new(2 * channels, 2, 1, false)?, true)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SaformerBlock {
    pub config: SaformerConfig,
    pub norm_rgb: LayerNorm,
    pub norm_spectrum: Option<LayerNorm>,
    /// One entry per distinct parameter set: `[tl, br]`, or a single set when
    /// regions share weights or tokenization is whole-grid.
    pub regions: Vec<RegionProjections>,
    pub ffn: Option<CcFfn>,
}

impl SaformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: SaformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        HeadLayout::new(config.channels, config.heads, 1)?;
        let c = config.channels;
        let sc = config.spectrum_channels;
        let norm_rgb = LayerNorm::new(store, &format!("{name}.norm_rgb"), c)?;
        let norm_spectrum = if config.uses_spectrum() {
            Some(LayerNorm::new(store, &format!("{name}.norm_spectrum"), sc)?)
        } else {
            None
        };
        let (qs, kvs) = config.sources();
        let width = |s: Source| if s == Source::Spectrum { sc } else { c };
        let sets: &[&str] = if config.dst && !config.share_region_weights {
            &["tl", "br"]
        } else {
            &["all"]
        };
        let mut regions = Vec::new();
        for tag in sets {
            regions.push(RegionProjections {
                q: Projection::new(store, &format!("{name}.{tag}.q"), width(qs), c, rng)?,
                k: Projection::new(store, &format!("{name}.{tag}.k"), width(kvs), c, rng)?,
                v: Projection::new(store, &format!("{name}.{tag}.v"), width(kvs), c, rng)?,
            });
        }
        let ffn = if config.cc_ffn {
            Some(CcFfn::new(store, &format!("{name}.ffn"), c, rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            norm_rgb,
            norm_spectrum,
            regions,
            ffn,
        })
    }
}

/// Query/key/value tensors of one region, each (N, m, H, W) — per sample
/// the same memory as (heads, m/heads, H·W).
#[derive(Clone, Debug)]
pub struct TokenSet<T> {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub region: Region,
    pub heads: usize,
    pub mask: Option<Arc<[T]>>,
}

impl<T: Scalar> TokenSet<T> {
    /// (heads, m/heads, H·W) per sample.
    pub fn head_shape(&self, g: &Graph<T>) -> [usize; 3] {
        let s = g.shape(self.q);
        [self.heads, s[1] / self.heads, s[2] * s[3]]
    }
}

fn same_order(a: &Arc<Vec<SortPermutation>>, b: &Arc<Vec<SortPermutation>>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Region-separated tokenization. `f` and (if the block uses one) `s` must
/// be tagged with the same sorted order.
pub fn dst_tokenize<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &SaformerBlock,
    f: &Ordered,
    s: Option<&Ordered>,
) -> Result<Vec<TokenSet<T>>> {
    let fp = f.perms("RGB features")?;
    let cfg = &block.config;
    let sn = match (cfg.uses_spectrum(), s, &block.norm_spectrum) {
        (true, Some(s), Some(norm)) => {
            if !same_order(fp, s.perms("spectrum")?) {
                return Err(Error::Contract("spectrum and RGB features are sorted differently".into()));
            }
            Some(norm.forward(g, store, s.var)?)
        }
        (true, _, _) => return Err(Error::Contract("block needs a spectrum input".into())),
        (false, _, _) => None,
    };
    let fn_ = block.norm_rgb.forward(g, store, f.var)?;
    let (qs, kvs) = cfg.sources();
    let pick = |src: Source| if src == Source::Spectrum { sn.expect("spectrum present") } else { fn_ };
    let (qin, kvin) = (pick(qs), pick(kvs));

    let (_, _, h, w) = g.value(f.var).dims4()?;
    let regions: Vec<(Region, Option<Arc<[T]>>)> = if cfg.dst {
        let m = DiagonalMask::new(h, w);
        vec![
            (Region::TopLeft, Some(m.tl_weights())),
            (Region::BottomRight, Some(m.br_weights())),
        ]
    } else {
        vec![(Region::Whole, None)]
    };
    let mut out = Vec::with_capacity(regions.len());
    for (i, (region, mask)) in regions.into_iter().enumerate() {
        let p = &block.regions[i.min(block.regions.len() - 1)];
        out.push(TokenSet {
            q: p.q.forward(g, store, qin, mask.as_ref())?,
            k: p.k.forward(g, store, kvin, mask.as_ref())?,
            v: p.v.forward(g, store, kvin, mask.as_ref())?,
            region,
            heads: cfg.heads,
            mask,
        });
    }
    Ok(out)
}

/// Attention per region plus the region's masked input as residual, summed
/// over regions. Also returns every region's (N, heads, d, d) attention.
pub fn cg_msa<T: Scalar>(g: &mut Graph<T>, tokens: &[TokenSet<T>], residual: Var) -> Result<(Var, Vec<Tensor<T>>)> {
    let mut total: Option<Var> = None;
    let mut maps = Vec::with_capacity(tokens.len());
    for t in tokens {
        let (a, attn) = g.attention(t.q, t.k, t.v, t.heads)?;
        maps.push(attn);
        let r = match &t.mask {
            Some(m) => g.mask_pixels(residual, m.clone())?,
            None => residual,
        };
        let o = g.add(a, r)?;
        total = Some(match total {
            Some(acc) => g.add(acc, o)?,
            None => o,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no token sets".into()))?;
    Ok((total, maps))
}

/// `θ · F̂ + (1 − θ) · deform(F_in)` with θ the first channel of a 2-way
/// softmax over a 1×1 conv of `[deform(F_in), F̂]`. Both inputs must be in
/// original pixel order.
pub fn cc_ffn<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ffn: &CcFfn,
    f_in: &Ordered,
    f_hat: &Ordered,
) -> Result<Var> {
    for (o, what) in [(f_in, "block input"), (f_hat, "attention output")] {
        if !matches!(o.order, PixelOrder::Original) {
            return Err(Error::Contract(format!("{what} must be in original pixel order")));
        }
    }
    let local = ffn.local.forward(g, store, f_in.var)?;
    let cat = g.concat(&[local, f_hat.var])?;
    let logits = ffn.fuse.forward(g, store, cat)?;
    let gate = g.softmax(logits, 1)?;
    let theta = g.slice_channels(gate, 0, 1)?;
    let diff = g.sub(f_hat.var, local)?;
    let gated = g.mul_plane(diff, theta)?;
    g.add(local, gated)
}

fn permute_maybe<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    perms: &Arc<Vec<SortPermutation>>,
    direction: Direction,
) -> Result<Var> {
    if perms.iter().all(SortPermutation::is_identity) {
        Ok(x)
    } else {
        permute_var(g, x, perms, direction)
    }
}

/// One block: tokenize, attend, revert to original order, gate, re-sort.
pub fn saformer_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &SaformerBlock,
    f: &Ordered,
    s: Option<&Ordered>,
) -> Result<Ordered> {
    let perms = f.perms("RGB features")?.clone();
    let tokens = dst_tokenize(g, store, block, f, s)?;
    let (f_hat, _) = cg_msa(g, &tokens, f.var)?;
    let Some(ffn) = &block.ffn else {
        return Ok(Ordered::sorted(f_hat, perms));
    };
    let f_in = Ordered::original(permute_maybe(g, f.var, &perms, Direction::Inverse)?);
    let f_hat = Ordered::original(permute_maybe(g, f_hat, &perms, Direction::Inverse)?);
    let out = cc_ffn(g, store, ffn, &f_in, &f_hat)?;
    Ok(Ordered::sorted(permute_maybe(g, out, &perms, Direction::Forward)?, perms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SaformerConfig {
        SaformerConfig {
            channels: 8,
            spectrum_channels: 5,
            heads: 2,
            dst: true,
            cg_msa: true,
            cc_ffn: true,
            stream: Stream::Dual,
            share_region_weights: false,
        }
    }

    fn identity(n: usize, h: usize, w: usize) -> Arc<Vec<SortPermutation>> {
        Arc::new(vec![SortPermutation::identity(h, w); n])
    }

    #[test]
    fn unsorted_input_is_a_contract_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let block = SaformerBlock::new(&mut store, "b", cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let s = g.constant(Tensor::zeros(&[1, 5, 4, 4]));
        let r = dst_tokenize(&mut g, &store, &block, &Ordered::original(f), Some(&Ordered::sorted(s, identity(1, 4, 4))));
        assert!(matches!(r, Err(Error::Contract(_))));
        let r = cc_ffn(
            &mut g,
            &store,
            block.ffn.as_ref().unwrap(),
            &Ordered::sorted(f, identity(1, 4, 4)),
            &Ordered::original(f),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_spectrum_gives_zero_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let block = SaformerBlock::new(&mut store, "b", cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let p = identity(1, 4, 4);
        let f = g.constant(Tensor::randn(&[1, 8, 4, 4], 1.0, &mut rng));
        let s = g.constant(Tensor::zeros(&[1, 5, 4, 4]));
        let t = dst_tokenize(&mut g, &store, &block, &Ordered::sorted(f, p.clone()), Some(&Ordered::sorted(s, p))).unwrap();
        assert_eq!(t.len(), 2);
        for ts in &t {
            assert!(g.value(ts.q).data().iter().all(|v| *v == 0.0));
            assert_eq!(ts.head_shape(&g), [2, 4, 16]);
        }
    }

    #[test]
    fn shared_weights_have_one_parameter_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        SaformerBlock::new(&mut a, "b", cfg(), &mut rng).unwrap();
        SaformerBlock::new(&mut b, "b", SaformerConfig { share_region_weights: true, ..cfg() }, &mut rng).unwrap();
        assert!(b.trainable_count() < a.trainable_count());
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let block = SaformerBlock::new(&mut store, "b", cfg(), &mut rng).unwrap();
        for (h, w) in [(4, 4), (3, 7), (6, 5)] {
            let mut g = Graph::new();
            let p = identity(2, h, w);
            let f = g.constant(Tensor::randn(&[2, 8, h, w], 1.0, &mut rng));
            let s = g.constant(Tensor::randn(&[2, 5, h, w], 1.0, &mut rng));
            let out = saformer_block(&mut g, &store, &block, &Ordered::sorted(f, p.clone()), Some(&Ordered::sorted(s, p))).unwrap();
            assert_eq!(g.shape(out.var), &[2, 8, h, w]);
        }
    }

    fn gate_output(bias: [f64; 2]) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let ffn = CcFfn::new(&mut store, "ffn", 4, &mut rng).unwrap();
        store.set(ffn.fuse.bias.unwrap(), Tensor::from_vec(&[2], bias.to_vec()).unwrap()).unwrap();
        let mut g = Graph::new();
        let f_in = g.constant(Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng));
        let f_hat = g.constant(Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng));
        let out = cc_ffn(&mut g, &store, &ffn, &Ordered::original(f_in), &Ordered::original(f_hat)).unwrap();
        let local = ffn.local.forward(&mut g, &store, f_in).unwrap();
        (g.value(out).clone(), g.value(f_hat).clone(), g.value(local).clone())
    }

    #[test]
    fn saturated_gate_passes_attention_output() {
        let (out, f_hat, _) = gate_output([20.0, 0.0]);
        assert!(out.max_abs_diff(&f_hat) < 1e-8);
    }

    #[test]
    fn symmetric_gate_averages() {
        let (out, f_hat, local) = gate_output([0.0, 0.0]);
        for ((o, a), b) in out.data().iter().zip(f_hat.data()).zip(local.data()) {
            assert!((o - (a + b) / 2.0).abs() < 1e-14);
        }
    }
}
