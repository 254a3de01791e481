//! Encoder, decoder and training of the spectral codebook.
//!
//! RGB goes through the encoder to an n_z-dimensional feature per pixel,
//! every band quantizes that feature against its own partition, and the
//! decoder maps the 31 selected codes back to a 31-band spectrum. Both
//! stacks are four stride-1 convolutions wide.

use std::sync::Arc;

use log::info;
use rand::Rng;

use super::{band_indices, kmeans_codebook, CodebookConfig, SpectralCodebook};
use crate::autodiff::{CodeTable, Graph, Var};
use crate::error::{reject, Error, Result};
use crate::nn::conv::ConvGeom;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Conv, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::{stream_rng, BANDS};

/// RNG stream offset for per-step batch sampling.
const BATCH_STREAM: u64 = 1 << 40;

/// Paired (3, H, W) RGB images and (31, H, W) spectral cubes.
#[derive(Clone, Debug, Default)]
pub struct SpectralPairs<T> {
    pub rgb: Vec<Tensor<T>>,
    pub cubes: Vec<Tensor<T>>,
}

impl<T: Scalar> SpectralPairs<T> {
    pub fn new(rgb: Vec<Tensor<T>>, cubes: Vec<Tensor<T>>) -> Result<Self> {
        if rgb.len() != cubes.len() || rgb.is_empty() {
            reject!("need equally many RGB images and cubes, got {} and {}", rgb.len(), cubes.len());
        }
        for (r, c) in rgb.iter().zip(&cubes) {
            let ok = r.rank() == 3 && c.rank() == 3 && r.shape()[0] == 3 && c.shape()[0] == BANDS;
            if !ok || r.shape()[1..] != c.shape()[1..] || r.shape() != rgb[0].shape() {
                reject!("RGB {:?} and cube {:?} do not pair", r.shape(), c.shape());
            }
        }
        Ok(Self { rgb, cubes })
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn batch(&self, picks: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let r: Vec<&Tensor<T>> = picks.iter().map(|&p| &self.rgb[p]).collect();
        let c: Vec<&Tensor<T>> = picks.iter().map(|&p| &self.cubes[p]).collect();
        Ok((Tensor::stack(&r)?, Tensor::stack(&c)?))
    }

    /// All RGB images as one (N, 3, H, W) batch.
    pub fn all_rgb(&self) -> Result<Tensor<T>> {
        Tensor::stack(&self.rgb.iter().collect::<Vec<_>>())
    }
}

/// Mean spectral PSNR (peak 1) of the model's reconstructions.
pub fn reconstruction_psnr<T: Scalar>(model: &CodebookModel<T>, data: &SpectralPairs<T>) -> Result<f64> {
    let mut total = 0.0;
    for (r, c) in data.rgb.iter().zip(&data.cubes) {
        let s = model.reconstruct(&Tensor::stack(&[r])?)?.spectrum;
        total += crate::metrics::psnr(&s, &Tensor::stack(&[c])?, 1.0)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// RGB → n_z features: three 3×3 convs with GELU, then a 1×1 projection.
#[derive(Clone, Copy, Debug)]
pub struct Encoder {
    pub layers: [Conv; 4],
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        hidden: usize,
        n_z: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = |i: usize, cin: usize, cout: usize, k: usize, store: &mut ParamStore<T>, rng: &mut _| {
            Conv::new(store, &format!("{prefix}.{i}"), ConvGeom::new(cin, cout, k, false)?, true, rng)
        };
        Ok(Self {
            layers: [
                c(0, 3, hidden, 3, store, rng)?,
                c(1, hidden, hidden, 3, store, rng)?,
                c(2, hidden, hidden, 3, store, rng)?,
                c(3, hidden, n_z, 1, store, rng)?,
            ],
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != 3 {
            reject!("encoder expects 3 input channels, got {c}");
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < 3 {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }
}

/// 31 quantized codes → spectrum: a 1×1 projection of the concatenated
/// codes, two 3×3 convs, and a 1×1 output layer, GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    pub project: Conv,
    pub mid: [Conv; 2],
    pub out: Conv,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n_z: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            project: Conv::new(store, &format!("{prefix}.0"), ConvGeom::new(BANDS * n_z, hidden, 1, false)?, true, rng)?,
            mid: [
                Conv::new(store, &format!("{prefix}.1"), ConvGeom::new(hidden, hidden, 3, false)?, true, rng)?,
                Conv::new(store, &format!("{prefix}.2"), ConvGeom::new(hidden, hidden, 3, false)?, true, rng)?,
            ],
            out: Conv::new(store, &format!("{prefix}.3"), ConvGeom::new(hidden, BANDS, 1, false)?, true, rng)?,
        })
    }

    fn tail<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let mut h = g.gelu(h);
        for layer in &self.mid {
            h = layer.forward(g, store, h)?;
            h = g.gelu(h);
        }
        self.out.forward(g, store, h)
    }

    /// Decode from selected code indices; gradients reach `z` through the
    /// straight-through estimator.
    pub fn forward_codes<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        indices: Arc<[u32]>,
        table: CodeTable<T>,
    ) -> Result<Var> {
        let w = g.param(store, self.project.weight);
        let b = match self.project.bias {
            Some(b) => g.param(store, b),
            None => return Err(Error::Config("decoder projection needs a bias".into())),
        };
        let h = g.code_project(z, w, b, indices, table)?;
        self.tail(g, store, h)
    }

    /// Decode from an explicit (N, 31·n_z, H, W) quantized tensor.
    pub fn forward_quantized<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, q: Var) -> Result<Var> {
        let h = self.project.forward(g, store, q)?;
        self.tail(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct CodebookModel<T> {
    pub config: CodebookConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// The (31·k, n_z) code table.
    pub codes: ParamId,
}

/// A reconstructed spectrum and the code choices behind it.
#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub spectrum: Tensor<T>,
    pub indices: Vec<u32>,
}

impl<T: Scalar> CodebookModel<T> {
    pub fn new(config: CodebookConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, 0);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "codebook.encoder", config.hidden, config.n_z, &mut rng)?;
        let decoder = Decoder::new(&mut store, "codebook.decoder", config.n_z, config.hidden, &mut rng)?;
        let codes = store.add(
            "codebook.codes",
            Tensor::randn(&[BANDS * config.k, config.n_z], 1.0, &mut rng),
            true,
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            codes,
        })
    }

    pub fn codebook(&self) -> Result<SpectralCodebook<T>> {
        SpectralCodebook::new(self.store.get(self.codes).clone(), self.config.k, self.config.mode)
    }

    pub fn encode(&self, rgb: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(rgb.clone());
        let z = self.encoder.forward(&mut g, &self.store, x)?;
        Ok(g.value(z).clone())
    }

    /// Spectrum for an (N, 3, H, W) RGB batch.
    pub fn reconstruct(&self, rgb: &Tensor<T>) -> Result<Reconstruction<T>> {
        let book = self.codebook()?;
        let mut g = Graph::new();
        let x = g.constant(rgb.clone());
        let z = self.encoder.forward(&mut g, &self.store, x)?;
        let (indices, _) = band_indices(g.value(z), &book)?;
        let indices: Arc<[u32]> = indices.into();
        let s = self.decoder.forward_codes(&mut g, &self.store, z, indices.clone(), book.table())?;
        Ok(Reconstruction {
            spectrum: g.value(s).clone(),
            indices: indices.to_vec(),
        })
    }

    /// Re-initialize the codes by k-means over encoder outputs of `rgb`
    /// (N, 3, H, W), subsampled to `kmeans_samples` pixels.
    pub fn init_codes_kmeans(&mut self, rgb: &Tensor<T>, seed: u64) -> Result<()> {
        let z = self.encode(rgb)?;
        let (n, nz, h, w) = z.d4();
        let hw = h * w;
        let total = n * hw;
        let mut rng = stream_rng(seed, u64::MAX);
        let take = self.config.kmeans_samples.min(total).max(1);
        let mut picks = rand::seq::index::sample(&mut rng, total, take).into_vec();
        picks.sort_unstable();
        let mut rows = Vec::with_capacity(take * nz);
        for &i in &picks {
            let (s, p) = (i / hw, i % hw);
            rows.extend((0..nz).map(|j| z.data()[(s * nz + j) * hw + p]));
        }
        let features = Tensor::from_vec(&[take, nz], rows)?;
        let book = kmeans_codebook(&features, self.config.k, self.config.mode, self.config.kmeans_iterations, seed)?;
        self.store.set(self.codes, book.codes().clone())
    }

    pub fn cast<U: Scalar>(&self) -> CodebookModel<U> {
        CodebookModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder,
            decoder: self.decoder,
            codes: self.codes,
        }
    }
}

/// Reconstruct a spectrum with a loaded prior; without one the call fails
/// with [`Error::PriorUnavailable`].
pub fn reconstruct_spectrum<T: Scalar>(rgb: &Tensor<T>, prior: Option<&CodebookModel<T>>) -> Result<Tensor<T>> {
    match prior {
        Some(m) => Ok(m.reconstruct(rgb)?.spectrum),
        None => Err(Error::PriorUnavailable("no codebook checkpoint loaded".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodebookLosses {
    pub reconstruction: f64,
    /// Mean squared distance pulling codes toward features.
    pub codebook: f64,
    /// Same distance, weighted by β, pulling features toward codes.
    pub commitment: f64,
    pub total: f64,
}

/// Optimizer state and dead-code bookkeeping for codebook training.
#[derive(Clone, Debug)]
pub struct CodebookTrainer<T> {
    pub model: CodebookModel<T>,
    pub optimizer: Adam<T>,
    pub step: u64,
    pub seed: u64,
    /// Step at which each table row was last selected.
    pub last_used: Vec<u64>,
}

impl<T: Scalar> CodebookTrainer<T> {
    pub fn new(model: CodebookModel<T>, seed: u64) -> Self {
        let rows = BANDS * model.config.k;
        let optimizer = Adam::new(
            AdamConfig {
                lr: model.config.lr,
                ..AdamConfig::default()
            },
            model.store.len(),
        );
        Self {
            model,
            optimizer,
            step: 0,
            seed,
            last_used: vec![0; rows],
        }
    }

    /// Build the loss graph for one batch. Returns the graph, the total
    /// loss variable, and the loss components.
    pub fn loss(&self, rgb: &Tensor<T>, cube: &Tensor<T>) -> Result<(Graph<T>, Var, CodebookLosses, Vec<u32>)> {
        let (n, _, h, w) = rgb.dims4()?;
        if cube.dims4()? != (n, BANDS, h, w) {
            reject!("cube batch {:?} does not pair with RGB batch {:?}", cube.shape(), rgb.shape());
        }
        let m = &self.model;
        let book = m.codebook()?;
        let table = book.table();
        let mut g = Graph::new();
        let x = g.constant(rgb.clone());
        let z = m.encoder.forward(&mut g, &m.store, x)?;
        let (indices, _) = band_indices(g.value(z), &book)?;
        let idx: Arc<[u32]> = indices.clone().into();
        let s = m.decoder.forward_codes(&mut g, &m.store, z, idx.clone(), table.clone())?;
        let target = g.constant(cube.clone());
        let recon = g.l1(s, target)?;
        let codes = g.param(&m.store, m.codes);
        let vq = g.vq_loss(z, codes, idx, table, T::from_f64(m.config.beta))?;
        let total = g.add(recon, vq)?;
        let r = g.scalar(recon).as_f64();
        let v = g.scalar(vq).as_f64() / (1.0 + m.config.beta);
        let losses = CodebookLosses {
            reconstruction: r,
            codebook: v,
            commitment: m.config.beta * v,
            total: g.scalar(total).as_f64(),
        };
        Ok((g, total, losses, indices))
    }

    /// One optimizer step on an (N, 3, H, W) / (N, 31, H, W) batch.
    pub fn train_step(&mut self, rgb: &Tensor<T>, cube: &Tensor<T>) -> Result<CodebookLosses> {
        let (g, total, losses, indices) = self.loss(rgb, cube)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("codebook loss at step {}", self.step),
                detail: format!("{losses:?}"),
            });
        }
        let mut grads = g.backward(total)?;
        let updates: Vec<_> = g
            .bindings()
            .filter_map(|(p, v)| grads.take(v).map(|t| (p, t)))
            .collect();
        self.optimizer.step(&mut self.model.store, &updates)?;

        self.step += 1;
        let table = self.model.codebook()?.table();
        let hw = indices.len() / (rgb.shape()[0] * BANDS);
        for (i, idx) in indices.iter().enumerate() {
            let band = (i / hw) % BANDS;
            self.last_used[table.row(band, *idx as usize)] = self.step;
        }
        self.reseed_dead_codes(rgb)?;
        Ok(losses)
    }

    /// Train until `self.step` reaches `steps`, drawing `batch_size` random
    /// pairs per step from a stream keyed on (seed, step).
    pub fn run(
        &mut self,
        data: &SpectralPairs<T>,
        steps: u64,
        batch_size: usize,
        mut on_step: impl FnMut(u64, &CodebookLosses),
    ) -> Result<()> {
        if data.is_empty() || batch_size == 0 {
            return Err(Error::Config("codebook training needs data and a positive batch size".into()));
        }
        while self.step < steps {
            let mut rng = stream_rng(self.seed, BATCH_STREAM + self.step);
            let picks: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..data.len())).collect();
            let (rgb, cube) = data.batch(&picks)?;
            let losses = self.train_step(&rgb, &cube)?;
            on_step(self.step, &losses);
        }
        Ok(())
    }

    fn reseed_dead_codes(&mut self, rgb: &Tensor<T>) -> Result<()> {
        let limit = self.model.config.dead_code_steps;
        let dead: Vec<usize> = (0..self.last_used.len())
            .filter(|&r| self.step - self.last_used[r] >= limit)
            .collect();
        if dead.is_empty() {
            return Ok(());
        }
        let z = self.model.encode(rgb)?;
        let (n, nz, h, w) = z.d4();
        let hw = h * w;
        let mut rng = stream_rng(self.seed ^ 0x5eed, self.step);
        let codes = self.model.store.get_mut(self.model.codes);
        for &r in &dead {
            let i = rng.random_range(0..n * hw);
            let (s, p) = (i / hw, i % hw);
            for j in 0..nz {
                codes.data_mut()[r * nz + j] = z.data()[(s * nz + j) * hw + p];
            }
            self.last_used[r] = self.step;
        }
        info!("step {}: re-seeded {} dead codes", self.step, dead.len());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::VqMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> CodebookConfig {
        CodebookConfig {
            k: 4,
            n_z: 3,
            hidden: 4,
            mode: VqMode::BandWise,
            kmeans_samples: 64,
            ..Default::default()
        }
    }

    #[test]
    fn code_projection_matches_explicit_quantization() {
        let m = CodebookModel::<f64>::new(small(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rgb = Tensor::rand_uniform(&[2, 3, 4, 5], 0.0, 1.0, &mut rng);
        let fast = m.reconstruct(&rgb).unwrap();
        let book = m.codebook().unwrap();
        let q = super::super::band_quantize(&m.encode(&rgb).unwrap(), &book).unwrap();
        let mut g = Graph::new();
        let qv = g.constant(q.quantized);
        let s = m.decoder.forward_quantized(&mut g, &m.store, qv).unwrap();
        assert!(g.value(s).max_abs_diff(&fast.spectrum) < 1e-12);
        assert_eq!(fast.spectrum.shape(), &[2, BANDS, 4, 5]);
    }

    #[test]
    fn missing_prior_is_reported() {
        let rgb = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(matches!(reconstruct_spectrum(&rgb, None), Err(Error::PriorUnavailable(_))));
    }

    #[test]
    fn encoder_rejects_wrong_channels() {
        let m = CodebookModel::<f32>::new(small(), 1).unwrap();
        assert!(matches!(m.encode(&Tensor::zeros(&[1, 4, 4, 4])), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn commitment_vanishes_on_codes() {
        let mut m = CodebookModel::<f64>::new(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rgb = Tensor::rand_uniform(&[1, 3, 2, 2], 0.0, 1.0, &mut rng);
        // Put each pixel's feature into every partition as its code.
        let z = m.encode(&rgb).unwrap();
        let mut codes = Tensor::zeros(&[BANDS * 4, 3]);
        for band in 0..BANDS {
            for p in 0..4 {
                for j in 0..3 {
                    codes.data_mut()[(band * 4 + p) * 3 + j] = z.data()[j * 4 + p];
                }
            }
        }
        m.store.set(m.codes, codes).unwrap();
        let t = CodebookTrainer::new(m, 0);
        let cube = Tensor::zeros(&[1, BANDS, 2, 2]);
        let (_, _, losses, _) = t.loss(&rgb, &cube).unwrap();
        assert_eq!(losses.commitment, 0.0);
        assert_eq!(losses.codebook, 0.0);
    }

    #[test]
    fn straight_through_gradient_is_identity() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = g.leaf(Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng), true);
        let q = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let qv = g.quantize_st(z, q).unwrap();
        let r = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let l = g.dot_const(qv, r.clone()).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).unwrap(), &r);
    }

    #[test]
    fn training_reduces_loss() {
        let mut m = CodebookModel::<f32>::new(small(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cube = Tensor::rand_uniform(&[2, BANDS, 6, 6], 0.0, 1.0, &mut rng);
        let rgb = Tensor::rand_uniform(&[2, 3, 6, 6], 0.0, 1.0, &mut rng);
        m.init_codes_kmeans(&rgb, 1).unwrap();
        let mut t = CodebookTrainer::new(m, 1);
        let first = t.train_step(&rgb, &cube).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = t.train_step(&rgb, &cube).unwrap();
        }
        assert!(last.total < first.total, "{first:?} -> {last:?}");
    }
}
