//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! The process exits 0 so that `cargo test` reports the suite's output
//! rather than aborting on the first miss; set `SPECRR_ACCEPTANCE_STRICT=1`
//! to turn any FAIL into a nonzero exit. `SPECRR_ACCEPTANCE_QUICK=1` skips
//! the training criteria (8–11), which take about half an hour on one core.
//! `SPECRR_ACCEPTANCE_ONLY=8,11` runs just the listed criteria (plus the
//! codebook training that 9–11 depend on).

mod common;

use std::time::{Duration, Instant};

use specrr::codebook::{
    code_usage_histogram, reconstruction_psnr, CodebookConfig, CodebookModel, CodebookTrainer, SpectralPairs,
};
use specrr::pipeline::{evaluate, train, EvalReport, ModelConfig, RemovalModel, TrainConfig, TrainObserver, TrainState};
use specrr::pipeline::PairSet;
use specrr::synth::{render_scene, spd_to_rgb, CameraResponse, IlluminantFamily, SynthConfig};
use specrr::Tensor;

use common::Outcome;

struct Line {
    id: u32,
    name: &'static str,
    outcome: Option<Outcome>,
    elapsed: Duration,
}

#[derive(Default)]
struct Runner {
    lines: Vec<Line>,
    only: Option<Vec<u32>>,
}

impl Runner {
    fn wanted(&self, id: u32) -> bool {
        self.only.as_ref().is_none_or(|ids| ids.contains(&id))
    }

    fn run(&mut self, id: u32, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        if !self.wanted(id) {
            return self.skip(id, name, "not in SPECRR_ACCEPTANCE_ONLY");
        }
        let t = Instant::now();
        let mut outcome = f();
        let elapsed = t.elapsed();
        if let (Ok(msg), Some(limit)) = (&outcome, limit) {
            if elapsed > limit {
                outcome = Err(format!("{msg}; but took {elapsed:.1?}, limit {limit:?}"));
            }
        }
        self.record(id, name, outcome, elapsed);
    }

    fn record(&mut self, id: u32, name: &'static str, outcome: Outcome, elapsed: Duration) {
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m.as_str()),
            Err(m) => ("FAIL", m.as_str()),
        };
        println!("{tag} {id:>2} {name:<28} {:>8.1}s  {msg}", elapsed.as_secs_f64());
        self.lines.push(Line { id, name, outcome: Some(outcome), elapsed });
    }

    fn skip(&mut self, id: u32, name: &'static str, why: &str) {
        println!("SKIP {id:>2} {name:<28} {:>8.1}s  {why}", 0.0);
        self.lines.push(Line { id, name, outcome: None, elapsed: Duration::ZERO });
    }

    fn failures(&self) -> Vec<&Line> {
        self.lines.iter().filter(|l| matches!(l.outcome, Some(Err(_)))).collect()
    }
}

fn mins(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

/// Cubes alternating between illuminant families, with their camera RGB.
fn cubes(n: usize, seed: u64, size: usize, families: &[IlluminantFamily]) -> SpectralPairs<f32> {
    let cam = CameraResponse::default();
    let (mut rgb, mut cubes) = (Vec::new(), Vec::new());
    for i in 0..n {
        let cube = render_scene(seed * 100_000 + i as u64, size, size, families[i % families.len()]).unwrap();
        rgb.push(spd_to_rgb(&cube, &cam).unwrap().map(|v| v.clamp(0.0, 1.0)));
        cubes.push(cube);
    }
    SpectralPairs::new(rgb, cubes).unwrap()
}

fn pairs(count: usize, seed: u64) -> PairSet<f32> {
    let cfg = SynthConfig { count, seed, ..SynthConfig::default() };
    let p = cfg.generate(&CameraResponse::default()).unwrap();
    PairSet::new(p.iter().map(|p| p.input.clone()).collect(), p.iter().map(|p| p.target.clone()).collect()).unwrap()
}

const BOTH: [IlluminantFamily; 2] = [IlluminantFamily::Broadband, IlluminantFamily::Narrowband];

/// Desk-scale codebook: K = 64 codes per band, 16-dim latents.
fn desk_codebook() -> CodebookConfig {
    CodebookConfig { k: 64, n_z: 16, hidden: 32, ..CodebookConfig::default() }
}

fn codebook_smoke(prior: &mut Option<CodebookModel<f32>>) -> Outcome {
    let train_set = cubes(200, 1, 32, &BOTH);
    let held = cubes(20, 2, 32, &BOTH);
    let mut model = CodebookModel::<f32>::new(desk_codebook(), 1).map_err(|e| e.to_string())?;
    let before = reconstruction_psnr(&model, &held).map_err(|e| e.to_string())?;
    model.init_codes_kmeans(&train_set.all_rgb().map_err(|e| e.to_string())?, 1).map_err(|e| e.to_string())?;
    let mut trainer = CodebookTrainer::new(model, 1);
    trainer.run(&train_set, 2000, 4, |_, _| {}).map_err(|e| e.to_string())?;
    let after = reconstruction_psnr(&trainer.model, &held).map_err(|e| e.to_string())?;
    *prior = Some(trainer.model);
    let msg = format!("held-out spectral PSNR {before:.2} → {after:.2} dB (+{:.2})", after - before);
    if after - before >= 5.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Quiet;
impl TrainObserver<f32> for Quiet {}

/// Train one ablation row at the desk budget and evaluate it.
fn train_row(row: &str, prior: &CodebookModel<f32>, data: &PairSet<f32>, held: &PairSet<f32>) -> specrr::Result<(EvalReport, Duration)> {
    let t = Instant::now();
    let cfg = ModelConfig { k: 64, n_z: 16, ..ModelConfig::default() }.ablation_row(row)?;
    let mut model = RemovalModel::new(cfg, Some(prior))?;
    let mut state = TrainState::new(&model, Default::default());
    // batch 1 keeps the full model inside the CPU budget
    let tc = TrainConfig { batch_size: 1, eval_every: 0, checkpoint_every: 0, ..TrainConfig::default() };
    train(&mut model, &mut state, data, None, &tc, &mut Quiet)?;
    Ok((evaluate(&model, held)?, t.elapsed()))
}

fn usage_divergence(prior: &CodebookModel<f32>) -> Outcome {
    let hist = |family| {
        let set = cubes(24, 3, 32, &[family]);
        let images: Vec<Tensor<f32>> = set.rgb.iter().map(|x| Tensor::stack(&[x]).unwrap()).collect();
        code_usage_histogram(&images, prior).map_err(|e| e.to_string())
    };
    let narrow = hist(IlluminantFamily::Narrowband)?;
    let broad = hist(IlluminantFamily::Broadband)?;
    let kl = specrr::codebook::symmetrized_kl(&narrow, &broad, 0.5).map_err(|e| e.to_string())?;
    let msg = format!("symmetrized KL(narrowband, broadband) = {kl:.4}");
    if kl > 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let strict = std::env::var("SPECRR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let quick = std::env::var("SPECRR_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let start = Instant::now();
    let only = std::env::var("SPECRR_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut r = Runner { only, ..Runner::default() };

    r.run(1, "VQ oracle equivalence", Some(Duration::from_secs(10)), || common::vq_oracle(100, 1));
    r.run(2, "partition confinement", None, || common::partition_confinement(10_000, 2));
    r.run(3, "permutation suite", None, || common::permutation_suite(1000, 3));
    r.run(4, "SDRS analytics", None, || common::sdrs_analytics(200, 4));
    r.run(5, "gradient suite", mins(2), || common::gradient_suite(0));
    r.run(6, "attention contracts", None, || common::attention_contracts(200, 6));
    r.run(7, "deformable identity", None, || common::deformable_identity(100, 7));

    const TRAINING: [(u32, &str); 4] = [
        (8, "codebook smoke training"),
        (9, "removal smoke training"),
        (10, "ablation direction"),
        (11, "code-usage divergence"),
    ];
    if quick || !(8..=11).any(|id| r.wanted(id)) {
        for (id, name) in TRAINING {
            r.skip(id, name, if quick { "SPECRR_ACCEPTANCE_QUICK is set" } else { "not in SPECRR_ACCEPTANCE_ONLY" });
        }
    } else {
        // 9–11 need the codebook, so criterion 8 runs whenever any of them does
        let mut prior = None;
        let only = r.only.take();
        r.run(8, "codebook smoke training", mins(15), || codebook_smoke(&mut prior));
        r.only = only;
        match prior {
            None => {
                for (id, name) in &TRAINING[1..] {
                    r.record(*id, name, Err("no codebook from criterion 8".into()), Duration::ZERO);
                }
            }
            Some(prior) => {
                let data = pairs(256, 10);
                let held = pairs(32, 11);
                let full = (r.wanted(9) || r.wanted(10)).then(|| train_row("full", &prior, &data, &held));
                match &full {
                    None => r.skip(9, "removal smoke training", "not in SPECRR_ACCEPTANCE_ONLY"),
                    Some(Ok((rep, t))) => {
                        let msg = format!(
                            "held-out PSNR {:.3} dB vs input {:.3} (+{:.3}); SSIM {:.4} vs {:.4}",
                            rep.psnr,
                            rep.input_psnr,
                            rep.psnr - rep.input_psnr,
                            rep.ssim,
                            rep.input_ssim
                        );
                        let ok = rep.psnr >= rep.input_psnr + 2.0 && *t <= mins(30).unwrap();
                        r.record(9, "removal smoke training", if ok { Ok(msg) } else { Err(msg) }, *t);
                    }
                    Some(Err(e)) => r.record(9, "removal smoke training", Err(e.to_string()), Duration::ZERO),
                }

                r.run(10, "ablation direction", None, || {
                    let full = full.as_ref().expect("trained above").as_ref().map_err(|e| e.to_string())?.0.psnr;
                    let base = train_row("base", &prior, &data, &held).map_err(|e| e.to_string())?.0.psnr;
                    let spr = train_row("+SSS+SDRS", &prior, &data, &held).map_err(|e| e.to_string())?.0.psnr;
                    let msg = format!("base {base:.3}, +SSS+SDRS {spr:.3}, full {full:.3} dB");
                    match (full >= base, spr >= base) {
                        (true, true) => Ok(msg),
                        (f, s) => Err(format!(
                            "{msg}; full ≥ base {}, +SSS+SDRS ≥ base {}",
                            if f { "holds" } else { "fails" },
                            if s { "holds" } else { "fails" }
                        )),
                    }
                });
                r.run(11, "code-usage divergence", None, || usage_divergence(&prior));
            }
        }
    }

    r.run(12, "format round-trips", None, || common::format_round_trips(12));

    let failed = r.failures();
    let passed = r.lines.iter().filter(|l| matches!(l.outcome, Some(Ok(_)))).count();
    println!(
        "acceptance: {passed} passed, {} failed, {} skipped in {:.1}s",
        failed.len(),
        r.lines.len() - passed - failed.len(),
        start.elapsed().as_secs_f64()
    );
    for l in &failed {
        println!("  failed: {} {} ({:.1}s)", l.id, l.name, l.elapsed.as_secs_f64());
    }
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
