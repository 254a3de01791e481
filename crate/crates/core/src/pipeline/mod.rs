//! The removal network: encoder, spectral prior reconstruction, a stack of
//! transformer (or residual) blocks and a residual decoder.
//!
//! ```text
//! I ─ enc ─ F ──────────────┬─ sort ─ blocks ─ unsort ─ dec ─(+ I)─ T̂
//!           └ adapter ─ VQ ─ S ─ sort ─ re-scale ┘
//! ```
//!
//! Every component is a toggle so that the ablation rows can be built from
//! one code path.

mod train;

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codebook::{band_indices, CodebookModel, Decoder, SpectralCodebook, VqMode};
use crate::error::{reject, Error, Result};
use crate::nn::conv::ConvGeom;
use crate::params::{Conv, ParamId, ParamStore};
use crate::refine::{permute_var, sort_keys, sort_permutation, sdrs_var, Direction, SortPermutation};
use crate::saformer::{saformer_block, Ordered, SaformerBlock, SaformerConfig, Stream};
use crate::tensor::{Scalar, Tensor};
use crate::{stream_rng, BANDS};

pub use train::{
    evaluate, removal_loss, run_ablation, train, AblationRow, AblationTable, EvalReport, LossComponents,
    NullObserver, PairSet, StepLog, TrainConfig, TrainObserver, TrainState,
};

/// Architecture and ablation toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub sss: bool,
    pub sdrs: bool,
    pub dst: bool,
    pub cg_msa: bool,
    pub cc_ffn: bool,
    pub stream: Stream,
    pub vq_mode: VqMode,
    /// Codes per band and code width; must match the loaded codebook.
    pub k: usize,
    pub n_z: usize,
    pub share_region_weights: bool,
    pub normalize_region_area: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            blocks: 2,
            heads: 4,
            sss: true,
            sdrs: true,
            dst: true,
            cg_msa: true,
            cc_ffn: true,
            stream: Stream::Dual,
            vq_mode: VqMode::BandWise,
            k: 256,
            n_z: 64,
            share_region_weights: false,
            normalize_region_area: false,
            seed: 0,
        }
    }
}

/// The ablation rows, from the plain residual network up to the full model.
pub const ABLATION_ROWS: [&str; 7] = [
    "base",
    "+SSS",
    "+SSS+SDRS",
    "+DST+CG-MSA+CC-FFN",
    "+SSS+SDRS+DST",
    "+SSS+SDRS+DST+CG-MSA",
    "full",
];

impl ModelConfig {
    /// Toggles of a named ablation row, keeping widths and seed from `self`.
    pub fn ablation_row(&self, row: &str) -> Result<Self> {
        let t = |sss, sdrs, dst, cg_msa, cc_ffn| Self {
            sss,
            sdrs,
            dst,
            cg_msa,
            cc_ffn,
            ..self.clone()
        };
        Ok(match row {
            "base" => t(false, false, false, false, false),
            "+SSS" => t(true, false, false, false, false),
            "+SSS+SDRS" => t(true, true, false, false, false),
            "+DST+CG-MSA+CC-FFN" => t(false, false, true, true, true),
            "+SSS+SDRS+DST" => t(true, true, true, false, false),
            "+SSS+SDRS+DST+CG-MSA" => t(true, true, true, true, false),
            "full" => t(true, true, true, true, true),
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation row `{other}`; expected one of {ABLATION_ROWS:?}"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            )));
        }
        if self.k == 0 || self.n_z == 0 {
            return Err(Error::Config("k and n_z must be positive".into()));
        }
        Ok(())
    }

    /// Whether the blocks are transformer blocks rather than residual blocks.
    pub fn uses_saformer(&self) -> bool {
        self.dst || self.cg_msa || self.cc_ffn
    }

    fn block_config(&self) -> SaformerConfig {
        SaformerConfig {
            channels: self.channels,
            spectrum_channels: BANDS,
            heads: self.heads,
            dst: self.dst,
            cg_msa: self.cg_msa,
            cc_ffn: self.cc_ffn,
            stream: self.stream,
            share_region_weights: self.share_region_weights,
        }
    }

    fn blocks_use_spectrum(&self) -> bool {
        self.uses_saformer() && self.blocks > 0 && self.block_config().uses_spectrum()
    }

    /// Whether a spectrum has to be reconstructed at all.
    pub fn needs_spectrum(&self) -> bool {
        self.sss || self.sdrs || self.blocks_use_spectrum()
    }

    /// Width of one band's row in a code-usage histogram.
    pub fn codes_per_band(&self) -> usize {
        match self.vq_mode {
            VqMode::BandWise => self.k,
            VqMode::Vanilla => BANDS * self.k,
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Residual([Conv; 2]),
    Transformer(SaformerBlock),
}

/// Handles into the frozen codebook copied into the removal store.
#[derive(Clone, Debug)]
struct Prior<T> {
    adapter: Conv,
    decoder: Decoder,
    book: SpectralCodebook<T>,
}

#[derive(Clone, Debug)]
pub struct RemovalModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    encoder: [Conv; 2],
    prior: Option<Prior<T>>,
    alpha: Option<ParamId>,
    inject: Option<Conv>,
    body: Vec<Body>,
    decoder: [Conv; 2],
}

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Restored image, unclamped.
    pub output: Var,
    /// Reconstructed spectrum in original pixel order, before re-scaling.
    pub spectrum: Option<Var>,
    /// (N, 31) band weights.
    pub band_weights: Option<Var>,
    /// (N, 31, H, W) code indices.
    pub indices: Option<Vec<u32>>,
}

/// Clamped output plus diagnostics, from [`RemovalModel::infer`].
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub output: Tensor<T>,
    pub spectrum: Option<Tensor<T>>,
    pub band_weights: Option<Tensor<T>>,
    pub indices: Option<Vec<u32>>,
}

impl<T: Scalar> RemovalModel<T> {
    /// Build a freshly initialized model. The codebook's tensors are copied
    /// in as frozen parameters; a prior is required whenever the config
    /// reconstructs a spectrum.
    pub fn new(config: ModelConfig, prior: Option<&CodebookModel<T>>) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut rng = stream_rng(config.seed, 1);
        let (mut store, prior_parts) = match (config.needs_spectrum(), prior) {
            (true, None) => {
                return Err(Error::PriorUnavailable(
                    "this configuration reconstructs a spectrum but no codebook was given".into(),
                ))
            }
            (true, Some(p)) => {
                let pc = &p.config;
                if (pc.k, pc.n_z, pc.mode) != (config.k, config.n_z, config.vq_mode) {
                    return Err(Error::Config(format!(
                        "codebook has k = {}, n_z = {}, mode {:?}; model expects k = {}, n_z = {}, mode {:?}",
                        pc.k, pc.n_z, pc.mode, config.k, config.n_z, config.vq_mode
                    )));
                }
                let mut store = p.store.clone();
                for id in store.ids().collect::<Vec<_>>() {
                    store.set_trainable(id, false);
                }
                (store, Some((p.decoder, p.codebook()?)))
            }
            (false, _) => (ParamStore::new(), None),
        };
        let conv = |store: &mut ParamStore<T>, name: &str, cin, cout, k, rng: &mut _| {
            Conv::new(store, name, ConvGeom::new(cin, cout, k, false)?, true, rng)
        };
        let encoder = [
            conv(&mut store, "removal.encoder.0", 3, c, 3, &mut rng)?,
            conv(&mut store, "removal.encoder.1", c, c, 3, &mut rng)?,
        ];
        let prior = match prior_parts {
            Some((decoder, book)) => Some(Prior {
                adapter: conv(&mut store, "removal.adapter", c, config.n_z, 1, &mut rng)?,
                decoder,
                book,
            }),
            None => None,
        };
        let alpha = if config.sdrs {
            Some(store.add("removal.sdrs.alpha", Tensor::full(&[BANDS], T::one()), true)?)
        } else {
            None
        };
        let inject = if config.needs_spectrum() && !config.blocks_use_spectrum() {
            Some(conv(&mut store, "removal.inject", BANDS, c, 1, &mut rng)?)
        } else {
            None
        };
        let mut body = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let name = format!("removal.block.{i}");
            body.push(if config.uses_saformer() {
                Body::Transformer(SaformerBlock::new(&mut store, &name, config.block_config(), &mut rng)?)
            } else {
                Body::Residual([
                    conv(&mut store, &format!("{name}.0"), c, c, 3, &mut rng)?,
                    conv(&mut store, &format!("{name}.1"), c, c, 3, &mut rng)?,
                ])
            });
        }
        let decoder = [
            conv(&mut store, "removal.decoder.0", c, c, 3, &mut rng)?,
            Conv::scaled(&mut store, "removal.decoder.1", ConvGeom::new(c, 3, 3, false)?, true, 0.1, &mut rng)?,
        ];
        Ok(Self {
            config,
            store,
            encoder,
            prior,
            alpha,
            inject,
            body,
            decoder,
        })
    }

    /// Number of trainable parameter tensors.
    pub fn trainable_tensors(&self) -> usize {
        self.store.trainable_count()
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.store
            .ids()
            .filter(|&id| self.store.is_trainable(id))
            .map(|id| self.store.get(id).numel())
            .sum()
    }

    /// Names of the frozen codebook tensors held by this model.
    pub fn frozen_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(id, _, _)| !self.store.is_trainable(*id))
            .map(|(_, n, _)| n.to_string())
            .collect()
    }

    /// Overwrite every tensor from `(name, tensor)` pairs, which must name
    /// exactly this model's parameters.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.store.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Config(format!("checkpoint tensor `{name}` is not a model parameter")))?;
            self.store.set(id, t.clone())?;
        }
        if let Some(p) = &mut self.prior {
            let id = self
                .store
                .find("codebook.codes")
                .ok_or_else(|| Error::Config("model lacks codebook codes".into()))?;
            p.book = SpectralCodebook::new(self.store.get(id).clone(), self.config.k, self.config.vq_mode)?;
        }
        Ok(())
    }

    /// Build the forward graph for an (N, 3, H, W) batch bound to `x`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Forward> {
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != 3 {
            reject!("removal model expects 3 input channels, got {c}");
        }
        let store = &self.store;
        let mut f = self.encoder[0].forward(g, store, x)?;
        f = g.gelu(f);
        f = self.encoder[1].forward(g, store, f)?;

        let mut spectrum = None;
        let mut indices = None;
        if let Some(p) = &self.prior {
            let z = p.adapter.forward(g, store, f)?;
            let (idx, _) = band_indices(g.value(z), &p.book)?;
            let idx: Arc<[u32]> = idx.into();
            let s = p.decoder.forward_codes(g, store, z, idx.clone(), p.book.table())?;
            spectrum = Some(s);
            indices = Some(idx.to_vec());
        }

        let perms: Arc<Vec<SortPermutation>> = match spectrum {
            Some(s) if self.config.sss => {
                let keys = sort_keys(g.value(s))?;
                Arc::new(keys.iter().map(|k| sort_permutation(k, h, w)).collect())
            }
            _ => Arc::new(vec![SortPermutation::identity(h, w); n]),
        };
        let mut s_sorted = spectrum;
        if self.config.sss {
            f = permute_var(g, f, &perms, Direction::Forward)?;
            if let Some(s) = s_sorted {
                s_sorted = Some(permute_var(g, s, &perms, Direction::Forward)?);
            }
        }
        let mut band_weights = None;
        if let (Some(alpha), Some(s)) = (self.alpha, s_sorted) {
            let a = g.param(store, alpha);
            let (r, wts, _) = sdrs_var(g, s, a, self.config.normalize_region_area)?;
            s_sorted = Some(r);
            band_weights = Some(wts);
        }
        if let (Some(inject), Some(s)) = (&self.inject, s_sorted) {
            let e = inject.forward(g, store, s)?;
            f = g.add(f, e)?;
        }

        let s_ordered = s_sorted.map(|s| Ordered::sorted(s, perms.clone()));
        let mut cur = Ordered::sorted(f, perms.clone());
        for b in &self.body {
            cur = match b {
                Body::Residual([c0, c1]) => {
                    let mut h = c0.forward(g, store, cur.var)?;
                    h = g.gelu(h);
                    h = c1.forward(g, store, h)?;
                    Ordered::sorted(g.add(cur.var, h)?, perms.clone())
                }
                Body::Transformer(block) => saformer_block(g, store, block, &cur, s_ordered.as_ref())?,
            };
        }
        let mut f = cur.var;
        if self.config.sss {
            f = permute_var(g, f, &perms, Direction::Inverse)?;
        }
        let mut d = self.decoder[0].forward(g, store, f)?;
        d = g.gelu(d);
        d = self.decoder[1].forward(g, store, d)?;
        let output = g.add(x, d)?;
        Ok(Forward {
            output,
            spectrum,
            band_weights,
            indices,
        })
    }

    /// Restore an (N, 3, H, W) batch; the output is clamped to [0, 1].
    pub fn infer(&self, rgb: &Tensor<T>) -> Result<Inference<T>> {
        if rgb.data().iter().any(|v| *v < T::zero() || *v > T::one()) {
            warn!("input values outside [0, 1]");
        }
        let mut g = Graph::new();
        let x = g.constant(rgb.clone());
        let fw = self.forward(&mut g, x)?;
        let out = g.value(fw.output).map(|v| v.max(T::zero()).min(T::one()));
        Ok(Inference {
            output: out,
            spectrum: fw.spectrum.map(|s| g.value(s).clone()),
            band_weights: fw.band_weights.map(|s| g.value(s).clone()),
            indices: fw.indices,
        })
    }

    pub fn cast<U: Scalar>(&self) -> RemovalModel<U> {
        RemovalModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder,
            prior: self.prior.as_ref().map(|p| Prior {
                adapter: p.adapter,
                decoder: p.decoder,
                book: SpectralCodebook::new(p.book.codes().cast(), p.book.k(), p.book.mode())
                    .expect("cast of a valid codebook"),
            }),
            alpha: self.alpha,
            inject: self.inject,
            body: self.body.clone(),
            decoder: self.decoder,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::codebook::CodebookConfig;

    pub(crate) fn tiny_prior<T: Scalar>() -> CodebookModel<T> {
        CodebookModel::new(
            CodebookConfig {
                k: 4,
                n_z: 4,
                hidden: 8,
                ..CodebookConfig::default()
            },
            3,
        )
        .unwrap()
    }

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 8,
            blocks: 1,
            heads: 2,
            k: 4,
            n_z: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn every_row_builds_and_keeps_shape() {
        let prior = tiny_prior::<f32>();
        let mut rng = stream_rng(0, 0);
        let x = Tensor::rand_uniform(&[1, 3, 12, 9], 0.0, 1.0, &mut rng);
        for row in ABLATION_ROWS {
            let cfg = tiny_config().ablation_row(row).unwrap();
            let m = RemovalModel::new(cfg, Some(&prior)).unwrap();
            let out = m.infer(&x).unwrap().output;
            assert_eq!(out.shape(), x.shape(), "{row}");
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn base_needs_no_prior() {
        let cfg = tiny_config().ablation_row("base").unwrap();
        assert!(!cfg.needs_spectrum());
        let m = RemovalModel::<f32>::new(cfg, None).unwrap();
        assert!(m.frozen_names().is_empty());
        let full = tiny_config();
        assert!(matches!(RemovalModel::<f32>::new(full, None), Err(Error::PriorUnavailable(_))));
    }

    #[test]
    fn codebook_tensors_are_frozen() {
        let prior = tiny_prior::<f32>();
        let m = RemovalModel::new(tiny_config(), Some(&prior)).unwrap();
        let frozen = m.frozen_names();
        assert!(frozen.iter().any(|n| n == "codebook.codes"));
        assert!(frozen.iter().all(|n| n.starts_with("codebook.")));
    }

    #[test]
    fn toggles_change_parameter_count() {
        let prior = tiny_prior::<f32>();
        let counts: Vec<usize> = ABLATION_ROWS
            .iter()
            .map(|r| {
                RemovalModel::new(tiny_config().ablation_row(r).unwrap(), Some(&prior))
                    .unwrap()
                    .trainable_scalars()
            })
            .collect();
        // +SSS adds the adapter and injection, +SDRS adds α.
        assert!(counts[1] > counts[0]);
        assert_eq!(counts[2], counts[1] + BANDS);
        // CC-FFN adds parameters on top of DST + CG-MSA.
        assert!(counts[6] > counts[5]);
    }

    #[test]
    fn mismatched_codebook_rejected() {
        let prior = tiny_prior::<f32>();
        let cfg = ModelConfig { k: 8, ..tiny_config() };
        assert!(matches!(RemovalModel::new(cfg, Some(&prior)), Err(Error::Config(_))));
    }
}
