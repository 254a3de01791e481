//! Losses, the training loop, held-out evaluation and ablation runs.

use std::fmt::{self, Write as _};

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, RemovalModel};
use crate::autodiff::{Graph, Var};
use crate::codebook::CodebookModel;
use crate::error::{reject, Error, Result};
use crate::metrics::{psnr, ssim};
use crate::optim::{Adam, AdamConfig};
use crate::stream_rng;
use crate::tensor::{Scalar, Tensor};

/// Weight of the `1 − SSIM` term.
pub const SSIM_WEIGHT: f64 = 0.2;

/// RNG stream offset for per-step batch sampling.
const BATCH_STREAM: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l1: f64,
    pub ssim: f64,
    pub total: f64,
}

/// `L1 + 0.2 · (1 − SSIM)` between a prediction and its target.
pub fn removal_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<(Var, LossComponents)> {
    let l1 = g.l1(pred, target)?;
    let s = g.ssim(pred, target)?;
    let w = T::from_f64(SSIM_WEIGHT);
    let dissim = g.affine(s, -w, w);
    let total = g.add(l1, dissim)?;
    let parts = LossComponents {
        l1: g.scalar(l1).as_f64(),
        ssim: g.scalar(s).as_f64(),
        total: g.scalar(total).as_f64(),
    };
    Ok((total, parts))
}

/// Paired (3, H, W) degraded inputs and clean targets.
#[derive(Clone, Debug, Default)]
pub struct PairSet<T> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
}

impl<T: Scalar> PairSet<T> {
    pub fn new(inputs: Vec<Tensor<T>>, targets: Vec<Tensor<T>>) -> Result<Self> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            reject!("pair set needs equally many inputs and targets, got {} and {}", inputs.len(), targets.len());
        }
        let shape = inputs[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            reject!("pair set images must be (3, H, W), got {shape:?}");
        }
        if inputs.iter().chain(&targets).any(|t| t.shape() != shape.as_slice()) {
            reject!("pair set images must all share shape {shape:?}");
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Stack the selected pairs into (N, 3, H, W) batches.
    pub fn batch(&self, picks: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let i: Vec<&Tensor<T>> = picks.iter().map(|&p| &self.inputs[p]).collect();
        let t: Vec<&Tensor<T>> = picks.iter().map(|&p| &self.targets[p]).collect();
        Ok((Tensor::stack(&i)?, Tensor::stack(&t)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Held-out evaluation period in steps; 0 disables it.
    pub eval_every: u64,
    /// Checkpoint period in steps; 0 disables it.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            adam: AdamConfig::default(),
            eval_every: 500,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

/// Everything needed to continue a run besides the parameters: the step
/// counter, optimizer moments and loss statistics. Batch sampling is keyed
/// on (seed, step), so no generator state needs saving.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub step: u64,
    pub optimizer: Adam<T>,
    /// Exponential moving average of the total loss (decay 0.98).
    pub loss_ema: f64,
    pub last: LossComponents,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &RemovalModel<T>, adam: AdamConfig) -> Self {
        Self {
            step: 0,
            optimizer: Adam::new(adam, model.store.len()),
            loss_ema: 0.0,
            last: LossComponents::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: LossComponents,
    pub loss_ema: f64,
}

/// Mean held-out metrics of the restored output and of the degraded input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub images: usize,
}

/// Hooks called by [`train`]. Checkpoints are written by the observer so the
/// loop itself stays free of file handling.
pub trait TrainObserver<T: Scalar> {
    fn on_step(&mut self, _log: &StepLog) {}
    fn on_eval(&mut self, _step: u64, _report: &EvalReport) {}
    fn on_checkpoint(&mut self, _model: &RemovalModel<T>, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NullObserver;

impl<T: Scalar> TrainObserver<T> for NullObserver {}

/// Train from `state.step` up to `config.steps`.
///
/// A non-finite loss aborts before any parameter is touched, so the model
/// and the last checkpoint written by the observer stay valid.
pub fn train<T: Scalar>(
    model: &mut RemovalModel<T>,
    state: &mut TrainState<T>,
    data: &PairSet<T>,
    held_out: Option<&PairSet<T>>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<()> {
    if data.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("training needs data and a positive batch size".into()));
    }
    while state.step < config.steps {
        let mut rng = stream_rng(config.seed, BATCH_STREAM + state.step);
        let picks: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let (x, t) = data.batch(&picks)?;

        let mut g = Graph::new();
        let xv = g.constant(x);
        let tv = g.constant(t);
        let fw = model.forward(&mut g, xv)?;
        let (loss, parts) = removal_loss(&mut g, fw.output, tv)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("removal loss at step {}", state.step + 1),
                detail: format!("{parts:?}"),
            });
        }
        let mut grads = g.backward(loss)?;
        let updates: Vec<_> = g.bindings().filter_map(|(p, v)| grads.take(v).map(|t| (p, t))).collect();
        state.optimizer.step(&mut model.store, &updates)?;

        state.step += 1;
        state.loss_ema = if state.step == 1 {
            parts.total
        } else {
            0.98 * state.loss_ema + 0.02 * parts.total
        };
        state.last = parts;
        let log = StepLog {
            step: state.step,
            loss: parts,
            loss_ema: state.loss_ema,
        };
        debug!("step {} loss {:.5} (ema {:.5})", log.step, parts.total, state.loss_ema);
        observer.on_step(&log);

        if let Some(h) = held_out {
            if config.eval_every > 0 && state.step.is_multiple_of(config.eval_every) {
                let r = evaluate(model, h)?;
                info!("step {}: held-out PSNR {:.2} dB (input {:.2} dB)", state.step, r.psnr, r.input_psnr);
                observer.on_eval(state.step, &r);
            }
        }
        if config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every) {
            observer.on_checkpoint(model, state)?;
        }
    }
    Ok(())
}

/// Mean PSNR/SSIM over a held-out set, one image at a time.
pub fn evaluate<T: Scalar>(model: &RemovalModel<T>, set: &PairSet<T>) -> Result<EvalReport> {
    let mut acc = [0.0; 4];
    for (i, t) in set.inputs.iter().zip(&set.targets) {
        let (x, t) = (Tensor::stack(&[i])?, Tensor::stack(&[t])?);
        let out = model.infer(&x)?.output;
        acc[0] += psnr(&out, &t, 1.0)?;
        acc[1] += ssim(&out, &t, 1.0)?;
        acc[2] += psnr(&x, &t, 1.0)?;
        acc[3] += ssim(&x, &t, 1.0)?;
    }
    let n = set.len().max(1) as f64;
    Ok(EvalReport {
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        input_psnr: acc[2] / n,
        input_ssim: acc[3] / n,
        images: set.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub sss: bool,
    pub sdrs: bool,
    pub dst: bool,
    pub cg_msa: bool,
    pub cc_ffn: bool,
    pub trainable_scalars: usize,
    pub psnr: f64,
    pub ssim: f64,
}

impl AblationRow {
    /// Evaluate an already trained model as a table row.
    pub fn measure<T: Scalar>(name: &str, model: &RemovalModel<T>, held_out: &PairSet<T>) -> Result<(Self, EvalReport)> {
        let r = evaluate(model, held_out)?;
        let c = &model.config;
        Ok((
            Self {
                name: name.to_string(),
                sss: c.sss,
                sdrs: c.sdrs,
                dst: c.dst,
                cg_msa: c.cg_msa,
                cc_ffn: c.cc_ffn,
                trainable_scalars: model.trainable_scalars(),
                psnr: r.psnr,
                ssim: r.ssim,
            },
            r,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Metrics of the unprocessed degraded input.
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,sss,sdrs,dst,cg_msa,cc_ffn,trainable_scalars,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.4},{:.5}",
                r.name, r.sss, r.sdrs, r.dst, r.cg_msa, r.cc_ffn, r.trainable_scalars, r.psnr, r.ssim
            );
        }
        s
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |b: bool| if b { "x" } else { " " };
        writeln!(f, "| row | SSS | SDRS | DST | CG-MSA | CC-FFN | params | PSNR | SSIM |")?;
        writeln!(f, "|---|---|---|---|---|---|---|---|---|")?;
        writeln!(
            f,
            "| input | | | | | | | {:.2} | {:.4} |",
            self.input_psnr, self.input_ssim
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "| {} | {} | {} | {} | {} | {} | {} | {:.2} | {:.4} |",
                r.name,
                mark(r.sss),
                mark(r.sdrs),
                mark(r.dst),
                mark(r.cg_msa),
                mark(r.cc_ffn),
                r.trainable_scalars,
                r.psnr,
                r.ssim
            )?;
        }
        Ok(())
    }
}

/// Train and evaluate one model per requested row under the same seed and
/// budget.
pub fn run_ablation<T: Scalar>(
    base: &ModelConfig,
    rows: &[&str],
    prior: Option<&CodebookModel<T>>,
    data: &PairSet<T>,
    held_out: &PairSet<T>,
    config: &TrainConfig,
) -> Result<AblationTable> {
    let mut table = AblationTable {
        input_psnr: 0.0,
        input_ssim: 0.0,
        rows: Vec::with_capacity(rows.len()),
    };
    for name in rows {
        let cfg = base.ablation_row(name)?;
        let mut model = RemovalModel::new(cfg, prior)?;
        let mut state = TrainState::new(&model, config.adam);
        info!("ablation row {name}: {} trainable scalars", model.trainable_scalars());
        train(&mut model, &mut state, data, None, config, &mut NullObserver)?;
        let (row, report) = AblationRow::measure(name, &model, held_out)?;
        table.input_psnr = report.input_psnr;
        table.input_ssim = report.input_ssim;
        table.rows.push(row);
    }
    Ok(table)
}
