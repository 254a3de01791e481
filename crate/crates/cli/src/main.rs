//! `specrr`: synthesize data, train the spectral codebook and the removal
//! network, evaluate, and run inference.
//!
//! Anything that affects results lives in the TOML run config; flags only
//! name paths and verbosity.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use specrr::checkpoint::{load_codebook, load_removal, save_codebook, save_removal};
use specrr::codebook::{code_usage_histogram, reconstruction_psnr, CodebookModel, CodebookTrainer, UsageHistogram};
use specrr::config::{require_same, resume_key, RunConfig};
use specrr::pipeline::{
    evaluate, run_ablation, train, AblationRow, AblationTable, EvalReport, RemovalModel, StepLog, TrainObserver,
    TrainState, ABLATION_ROWS,
};
use specrr::synth::{
    load_dataset, load_rgb_png, pair_set, save_rgb_png, spd_to_rgb, spectral_pairs, write_dataset, CameraResponse,
};
use specrr::{Tensor, BANDS};

const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "specrr", version, about = "Spectral-codebook guided reflection removal")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    HeldOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Layer {
    /// Clean transmission images.
    Transmission,
    /// Renderings of the reflection cubes.
    Reflection,
    /// Degraded inputs.
    Input,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic reflection pairs and a manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Which config section to generate from.
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the spectral codebook on a synthesized dataset.
    TrainCodebook {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a codebook checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the removal network against a frozen codebook.
    TrainRemoval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Codebook checkpoint; required when the model reads the spectrum.
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Dataset evaluated every `train.eval_every` steps.
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report PSNR/SSIM on a dataset, or train and compare ablation rows.
    Eval {
        /// Held-out dataset.
        #[arg(long)]
        data: PathBuf,
        /// Removal checkpoint to evaluate.
        #[arg(long, required_unless_present = "ablation")]
        checkpoint: Option<PathBuf>,
        /// Train every row of the ablation table under one budget.
        #[arg(long)]
        ablation: bool,
        /// Rows to run with --ablation (default: all).
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training data for --ablation.
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Directory for the report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove reflections from one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Per-band re-scaling weights as CSV.
        #[arg(long)]
        weights_csv: Option<PathBuf>,
        /// Code-usage histogram; `.png` renders a chart, anything else CSV.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Code-usage histogram of a codebook over a dataset.
    Histogram {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "transmission")]
        layer: Layer,
        /// CSV output (band, code_index, count).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

/// JSON-lines metrics file, appended to when resuming.
fn metrics_log(path: &Path, append: bool) -> anyhow::Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cmd_synth(config: Option<&Path>, out: &Path, split: Split, force: bool) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let synth = match split {
        Split::Train => &cfg.synth,
        Split::HeldOut => &cfg.held_out,
    };
    let entries = write_dataset(out, synth, &CameraResponse::default(), force)?;
    write_config(out, &cfg)?;
    println!("wrote {} pairs to {}", entries.len(), out.display());
    Ok(())
}

fn cmd_train_codebook(config: Option<&Path>, data: &Path, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let samples = load_dataset(data)?;
    let pairs = spectral_pairs(&samples, &CameraResponse::default())?;
    let tc = &cfg.codebook_training;

    let mut trainer = match resume {
        Some(p) => {
            let (t, snap) = load_codebook(p)?;
            require_same("codebook", &snap.config.codebook, &cfg.codebook)?;
            let key = |c: &RunConfig| {
                json!({"batch_size": c.codebook_training.batch_size, "seed": c.codebook_training.seed})
            };
            require_same("codebook_training", &key(&snap.config), &key(&cfg))?;
            info!("resuming codebook training at step {}", t.step);
            t
        }
        None => {
            let mut model = CodebookModel::new(cfg.codebook.clone(), tc.seed)?;
            if tc.kmeans_init {
                let take: Vec<usize> = (0..pairs.len().min(32)).collect();
                let (rgb, _) = pairs.batch(&take)?;
                model.init_codes_kmeans(&rgb, tc.seed)?;
            }
            CodebookTrainer::new(model, tc.seed)
        }
    };
    write_config(out, &cfg)?;
    let mut log = metrics_log(&out.join("codebook_metrics.jsonl"), resume.is_some())?;

    while trainer.step < tc.steps {
        let next = match tc.checkpoint_every {
            0 => tc.steps,
            n => ((trainer.step / n + 1) * n).min(tc.steps),
        };
        let mut io = Ok(());
        trainer.run(&pairs, next, tc.batch_size, |step, l| {
            if tc.log_every > 0 && step % tc.log_every == 0 {
                info!("step {step}: reconstruction {:.5} total {:.5}", l.reconstruction, l.total);
                let rec = json!({
                    "step": step,
                    "reconstruction": l.reconstruction,
                    "codebook": l.codebook,
                    "commitment": l.commitment,
                    "total": l.total,
                });
                if io.is_ok() {
                    io = writeln!(log, "{rec}");
                }
            }
        })?;
        io?;
        log.flush()?;
        save_codebook(&out.join(format!("codebook-{next:06}.ckpt")), &trainer, &cfg)?;
    }
    let path = out.join("codebook.ckpt");
    save_codebook(&path, &trainer, &cfg)?;
    let psnr = reconstruction_psnr(&trainer.model, &pairs)?;
    println!(
        "codebook trained to step {}; training-set spectral PSNR {psnr:.2} dB; saved {}",
        trainer.step,
        path.display()
    );
    Ok(())
}

struct RemovalLog<'a> {
    log: BufWriter<File>,
    out: &'a Path,
    cfg: &'a RunConfig,
    error: Option<std::io::Error>,
}

impl RemovalLog<'_> {
    fn record(&mut self, v: serde_json::Value) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.log, "{v}") {
                self.error = Some(e);
            }
        }
    }
}

impl TrainObserver<f32> for RemovalLog<'_> {
    fn on_step(&mut self, s: &StepLog) {
        self.record(json!({
            "kind": "step",
            "step": s.step,
            "l1": s.loss.l1,
            "ssim_loss": s.loss.ssim,
            "total": s.loss.total,
            "loss_ema": s.loss_ema,
        }));
    }

    fn on_eval(&mut self, step: u64, r: &EvalReport) {
        self.record(json!({
            "kind": "eval",
            "step": step,
            "psnr": r.psnr,
            "ssim": r.ssim,
            "input_psnr": r.input_psnr,
            "input_ssim": r.input_ssim,
        }));
    }

    fn on_checkpoint(&mut self, model: &RemovalModel<f32>, state: &TrainState<f32>) -> specrr::Result<()> {
        let _ = self.log.flush();
        save_removal(
            &self.out.join(format!("removal-{:06}.ckpt", state.step)),
            model,
            state,
            self.cfg,
        )
    }
}

fn load_prior(path: Option<&Path>, cfg: &RunConfig, needed: bool) -> anyhow::Result<Option<CodebookModel<f32>>> {
    if !needed {
        return Ok(None);
    }
    let Some(path) = path else {
        bail!(specrr::Error::PriorUnavailable(
            "the model configuration reads the spectrum; pass --codebook".into()
        ));
    };
    let (trainer, snap) = load_codebook(path)?;
    require_same("codebook", &snap.config.codebook, &cfg.codebook)?;
    Ok(Some(trainer.model))
}

fn cmd_train_removal(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    codebook: Option<&Path>,
    held_out: Option<&Path>,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let data = pair_set(&load_dataset(data)?)?;
    let held_out = held_out.map(|p| load_dataset(p).and_then(|s| pair_set(&s))).transpose()?;

    let (mut model, mut state) = match resume {
        Some(p) => {
            let (m, s, snap) = load_removal(p)?;
            require_same("", &resume_key(&snap.config), &resume_key(&cfg))?;
            info!("resuming removal training at step {}", s.step);
            (m, s)
        }
        None => {
            let prior = load_prior(codebook, &cfg, cfg.model.needs_spectrum())?;
            let m = RemovalModel::new(cfg.model.clone(), prior.as_ref())?;
            let s = TrainState::new(&m, cfg.train.adam);
            (m, s)
        }
    };
    info!("{} trainable scalars", model.trainable_scalars());
    write_config(out, &cfg)?;
    let mut obs = RemovalLog {
        log: metrics_log(&out.join("metrics.jsonl"), resume.is_some())?,
        out,
        cfg: &cfg,
        error: None,
    };
    train(&mut model, &mut state, &data, held_out.as_ref(), &cfg.train, &mut obs)?;
    if let Some(e) = obs.error.take() {
        return Err(e).context("writing metrics log");
    }
    obs.log.flush()?;
    let path = out.join("removal.ckpt");
    save_removal(&path, &model, &state, &cfg)?;
    println!("removal model trained to step {}; saved {}", state.step, path.display());
    if let Some(h) = &held_out {
        let r = evaluate(&model, h)?;
        println!("held-out PSNR {:.2} dB (input {:.2} dB)", r.psnr, r.input_psnr);
    }
    Ok(())
}

struct EvalArgs {
    data: PathBuf,
    checkpoint: Option<PathBuf>,
    ablation: bool,
    rows: Vec<String>,
    config: Option<PathBuf>,
    train_data: Option<PathBuf>,
    codebook: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let held_out = pair_set(&load_dataset(&a.data)?)?;
    let table = if a.ablation {
        let cfg = load_config(a.config.as_deref())?;
        let Some(train_dir) = &a.train_data else {
            bail!(specrr::Error::Config("--ablation needs --train-data".into()));
        };
        let data = pair_set(&load_dataset(train_dir)?)?;
        let rows: Vec<&str> = if a.rows.is_empty() {
            ABLATION_ROWS.to_vec()
        } else {
            a.rows.iter().map(String::as_str).collect()
        };
        // fail on a bad row name before any training starts
        for r in &rows {
            cfg.model.ablation_row(r)?;
        }
        let spectral = rows.iter().any(|r| cfg.model.ablation_row(r).is_ok_and(|m| m.needs_spectrum()));
        let prior = load_prior(a.codebook.as_deref(), &cfg, spectral)?;
        if let Some(out) = &a.out {
            write_config(out, &cfg)?;
        }
        run_ablation(&cfg.model, &rows, prior.as_ref(), &data, &held_out, &cfg.train)?
    } else {
        let ck = a.checkpoint.as_deref().expect("clap requires --checkpoint");
        let (model, _, snap) = load_removal(ck)?;
        if let Some(out) = &a.out {
            write_config(out, &snap.config)?;
        }
        let (row, r) = AblationRow::measure("model", &model, &held_out)?;
        AblationTable {
            input_psnr: r.input_psnr,
            input_ssim: r.input_ssim,
            rows: vec![row],
        }
    };
    print!("{table}");
    if let Some(out) = &a.out {
        fs::write(out.join("eval.csv"), table.to_csv())?;
        fs::write(out.join("eval.md"), table.to_string())?;
        fs::write(out.join("eval.json"), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

fn cmd_infer(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    weights_csv: Option<&Path>,
    histogram: Option<&Path>,
) -> anyhow::Result<()> {
    let (model, _, _) = load_removal(checkpoint)?;
    let rgb = load_rgb_png(input)?;
    let (_, h, w) = (rgb.shape()[0], rgb.shape()[1], rgb.shape()[2]);
    let res = model.infer(&Tensor::stack(&[&rgb])?)?;
    save_rgb_png(output, &res.output)?;
    println!("wrote {} ({w}x{h})", output.display());

    if let Some(p) = weights_csv {
        let Some(wts) = &res.band_weights else {
            bail!(specrr::Error::Config("the model has no band re-scaling (sdrs = false)".into()));
        };
        let mut s = String::from("band,wavelength_nm,weight\n");
        for (b, v) in wts.data().iter().take(BANDS).enumerate() {
            s.push_str(&format!("{b},{},{v}\n", specrr::synth::wavelength(b)));
        }
        fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = histogram {
        let Some(idx) = &res.indices else {
            bail!(specrr::Error::PriorUnavailable("the model does not reconstruct a spectrum".into()));
        };
        let mut hist = UsageHistogram::new(model.config.codes_per_band());
        hist.accumulate(idx, h * w);
        write_histogram(&hist, p)?;
    }
    Ok(())
}

fn write_histogram(hist: &UsageHistogram, path: &Path) -> anyhow::Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        hist.render_png(path)?;
    } else {
        fs::write(path, hist.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_histogram(codebook: &Path, data: &Path, layer: Layer, out: &Path, png: Option<&Path>) -> anyhow::Result<()> {
    let (trainer, _) = load_codebook(codebook)?;
    let cam = CameraResponse::default();
    let samples = load_dataset(data)?;
    let images = samples
        .iter()
        .map(|s| {
            let rgb = match layer {
                Layer::Transmission => s.target.clone(),
                Layer::Reflection => spd_to_rgb(&s.r_cube, &cam)?.map(|v| v.clamp(0.0, 1.0)),
                Layer::Input => s.input.clone(),
            };
            Tensor::stack(&[&rgb])
        })
        .collect::<specrr::Result<Vec<_>>>()?;
    let hist = code_usage_histogram(&images, &trainer.model)?;
    write_histogram(&hist, out)?;
    if let Some(p) = png {
        hist.render_png(p)?;
    }
    println!("{} selections over {} images", hist.total(), images.len());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            config,
            out,
            split,
            force,
        } => cmd_synth(config.as_deref(), &out, split, force),
        Command::TrainCodebook {
            config,
            data,
            out,
            resume,
        } => cmd_train_codebook(config.as_deref(), &data, &out, resume.as_deref()),
        Command::TrainRemoval {
            config,
            data,
            out,
            codebook,
            held_out,
            resume,
        } => cmd_train_removal(
            config.as_deref(),
            &data,
            &out,
            codebook.as_deref(),
            held_out.as_deref(),
            resume.as_deref(),
        ),
        Command::Eval {
            data,
            checkpoint,
            ablation,
            rows,
            config,
            train_data,
            codebook,
            out,
        } => cmd_eval(EvalArgs {
            data,
            checkpoint,
            ablation,
            rows,
            config,
            train_data,
            codebook,
            out,
        }),
        Command::Infer {
            checkpoint,
            input,
            output,
            weights_csv,
            histogram,
        } => cmd_infer(&checkpoint, &input, &output, weights_csv.as_deref(), histogram.as_deref()),
        Command::Histogram {
            codebook,
            data,
            layer,
            out,
            png,
        } => cmd_histogram(&codebook, &data, layer, &out, png.as_deref()),
    }
}

/// Exit status per error kind, so scripts can tell a bad config from a
/// corrupt file.
fn exit_code(e: &anyhow::Error) -> (u8, &'static str) {
    use specrr::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::Config(_)) => (2, "config"),
        Some(E::RejectedInput(_)) => (3, "rejected-input"),
        Some(E::Parse { .. }) => (4, "parse"),
        Some(E::IncompatibleCheckpoint(_)) => (5, "incompatible-checkpoint"),
        Some(E::Io { .. }) => (6, "io"),
        Some(E::PriorUnavailable(_)) => (7, "prior-unavailable"),
        Some(E::NonFinite { .. }) => (8, "non-finite"),
        _ => (1, "error"),
    }
}

/// The error chain joined with `: `, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            eprintln!("error[{kind}]: {}", describe(&e));
            ExitCode::from(code)
        }
    }
}
