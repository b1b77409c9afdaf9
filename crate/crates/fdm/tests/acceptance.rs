//! One line per acceptance criterion, written straight to stdout so the
//! verdicts show up without `--nocapture`.

use std::io::Write;
use std::time::{Duration, Instant};

use fdm::checks::{self, Check};
use fdm::commands::cmd_train;
use fdm::config::ExperimentConfig;
use fdm::corpus;
use fdm::experiment::Experiment;
use fdm::formats::Checkpoint;
use fdm_core::denoiser::{Denoiser, DenoiserConfig};
use fdm_core::sampler::{generate_seeds, SamplerConfig};
use fdm_core::schedules::{NoiseSchedule, RescaleMode, StageKind, StageSchedule};
use fdm_core::transforms::{TransformKind, TransformStack};
use fdm_core::{Shape, Tensor};
use tempfile::TempDir;

const DRAWS: usize = 100_000;

struct Verdict {
    id: &'static str,
    title: &'static str,
    checks: Vec<Check>,
    elapsed: Duration,
    budget: Option<Duration>,
}

impl Verdict {
    fn passed(&self) -> bool {
        checks::all_passed(&self.checks) && self.budget.is_none_or(|b| self.elapsed <= b)
    }

    fn report(&self) {
        let mut out = std::io::stdout().lock();
        let budget = match self.budget {
            Some(b) => format!(", budget {:.0?}", b),
            None => String::new(),
        };
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(out, "{verdict} {} {} ({:.1?}{budget})", self.id, self.title, self.elapsed).unwrap();
        for c in &self.checks {
            writeln!(out, "    {}", c.line()).unwrap();
        }
        out.flush().unwrap();
    }
}

fn run(
    id: &'static str,
    title: &'static str,
    budget: Option<Duration>,
    f: impl FnOnce() -> anyhow::Result<Vec<Check>>,
) -> Verdict {
    let start = Instant::now();
    let checks = f().unwrap_or_else(|e| vec![Check::at_most(format!("{id}.error"), f64::NAN, 0.0, format!("{e:#}"))]);
    let v = Verdict {
        id,
        title,
        checks,
        elapsed: start.elapsed(),
        budget,
    };
    v.report();
    v
}

fn config(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::default_config().with_overrides(&o).unwrap()
}

fn ds_schedule(k: usize, mode: RescaleMode) -> (TransformStack, NoiseSchedule) {
    let stack = TransformStack::downsample(Shape::new(3, 32, 32), k).unwrap();
    let ns = NoiseSchedule::new(StageSchedule::new(k, StageKind::Linear), &stack.dims(), stack.gammas(), mode).unwrap();
    (stack, ns)
}

/// Trains with `cfg` into a fresh directory and returns the experiment,
/// its EMA network, the per-step losses and the training wall time.
fn train(cfg: &ExperimentConfig, dir: &TempDir) -> anyhow::Result<(Experiment, Denoiser, Vec<f64>, Duration)> {
    let cfg = cfg.set("output.dir", dir.path().display().to_string())?;
    let start = Instant::now();
    let summary = cmd_train(&cfg, None, &mut std::io::sink())?;
    let wall = start.elapsed();
    let ck = Checkpoint::load(&summary.checkpoint)?;
    let exp = Experiment::from_checkpoint(&cfg, &ck)?;
    let net = exp.ema_net(&ck)?;
    Ok((exp, net, summary.losses, wall))
}

fn c1() -> anyhow::Result<Vec<Check>> {
    let mut out = Vec::new();
    for mode in [RescaleMode::SignalPreserved, RescaleMode::VariancePreserved] {
        for k in [1, 2, 3] {
            let (stack, ns) = ds_schedule(k, mode);
            out.extend(checks::schedule_algebra(&ns, &stack.dims(), stack.gammas(), 10_000, k as u64)?);
        }
    }
    Ok(out)
}

fn c2(corpus: &[Tensor]) -> anyhow::Result<Vec<Check>> {
    let mut out = Vec::new();
    for mode in ["sp", "vp"] {
        let cfg = config(&[&format!("schedule.rescale={mode}")]);
        let exp = Experiment::from_corpus(&cfg, corpus)?;
        let mut checks = checks::boundary_snr(&exp.stack, &exp.ns, corpus, cfg.zeta, DRAWS, 2)?;
        for c in &mut checks {
            c.name = format!("{mode}.{}", c.name);
        }
        out.extend(checks);
    }
    Ok(out)
}

fn c3() -> anyhow::Result<Vec<Check>> {
    let mut out = Vec::new();
    let stages = StageSchedule::new(2, StageKind::Linear);
    for mode in [RescaleMode::SignalPreserved, RescaleMode::VariancePreserved] {
        let (stack, ns, x) = checks::probe_setup(TransformKind::Downsample, &stages, mode, 3)?;
        out.extend(checks::process_consistency(&stack, &ns, &x, DRAWS, 3)?);
        out.push(checks::posterior_grid_bayes(&ns)?);
    }
    Ok(out)
}

fn c4() -> anyhow::Result<Vec<Check>> {
    let (stack, _) = ds_schedule(2, RescaleMode::VariancePreserved);
    checks::boundary_operators(&stack, DRAWS, 4)
}

fn c5() -> anyhow::Result<Vec<Check>> {
    let (stack, ns) = ds_schedule(0, RescaleMode::VariancePreserved);
    let mut net = Denoiser::new(DenoiserConfig::default(), stack.shapes(), 5)?;
    checks::perturb(&mut net, 0.05, 5);
    let mut out = Vec::new();
    for eta in [0.0, 1.0] {
        out.push(checks::k0_reduction(&net, &stack, &ns, eta, 0.004, 5)?);
    }
    Ok(out)
}

fn c6(corpus: &[Tensor]) -> anyhow::Result<Vec<Check>> {
    let (stack, ns) = ds_schedule(2, RescaleMode::VariancePreserved);
    let mut net = Denoiser::<f32>::new(DenoiserConfig::default(), stack.shapes(), 6)?.cast::<f64>();
    checks::perturb(&mut net, 0.05, 6);
    Ok(vec![checks::gradient_check(&net, &stack, &ns, &corpus[..8], 100, 6)?])
}

fn c7(exp: &Experiment, net: &Denoiser, losses: &[f64], wall: Duration, corpus: &[Tensor]) -> anyhow::Result<Vec<Check>> {
    let minutes = wall.as_secs_f64() / 60.0;
    let mut out = vec![
        Check::at_most("training.wall_minutes", minutes, 30.0, format!("{} steps", losses.len())),
        checks::loss_drop(losses)?,
    ];
    let scfg = exp.sampler_config();
    let seeds: Vec<u64> = (0..512).collect();
    let samples = generate_seeds(net, &exp.stack, &exp.ns, &scfg, &seeds, &mut |_, _, _| {})?;
    out.extend(checks::moment_match(&samples, corpus));
    Ok(out)
}

fn c8(exp: &Experiment, net: &Denoiser) -> anyhow::Result<Vec<Check>> {
    let scfg = SamplerConfig {
        eta: 0.0,
        ..exp.sampler_config()
    };
    Ok(vec![
        checks::determinism(net, &exp.stack, &exp.ns, &scfg, 8)?,
        checks::trajectory_prefix(net, &exp.stack, &exp.ns, &scfg)?,
    ])
}

fn c9_one(exp: &Experiment, net: &Denoiser, corpus: &[Tensor], label: &str) -> anyhow::Result<Vec<Check>> {
    let scfg = SamplerConfig {
        eta: 0.0,
        ..exp.sampler_config()
    };
    // held-out images: the last 64 of the corpus
    let images = &corpus[corpus.len() - 64..];
    let report = checks::conditional_faithfulness(net, &exp.stack, &exp.ns, &scfg, exp.config.cond, images, label)?;
    Ok(report.checks)
}

#[test]
fn acceptance() {
    let corpus_cfg = config(&[]);
    let corpus = corpus::load(&corpus_cfg.corpus, 32, 3, corpus_cfg.corpus_seed).unwrap();
    let mut verdicts = vec![
        run("C1", "schedule algebra", Some(Duration::from_secs(1)), c1),
        run("C2", "boundary SNR, SP and VP", Some(Duration::from_secs(60)), || c2(&corpus)),
        run("C3", "process consistency and posterior", Some(Duration::from_secs(120)), c3),
        run("C4", "boundary noise operators", None, c4),
        run("C5", "K=0 reduction", None, c5),
        run("C6", "finite-difference gradients", None, || c6(&corpus)),
    ];

    let ds_dir = TempDir::new().unwrap();
    let mut trained = Err(anyhow::anyhow!("training did not run"));
    verdicts.push(run("C7", "desk-scale training", None, || {
        trained = train(&corpus_cfg, &ds_dir).map_err(|e| anyhow::anyhow!("training failed: {e:#}"));
        let (exp, net, losses, wall) = trained.as_ref().map_err(|e| anyhow::anyhow!("{e}"))?;
        c7(exp, net, losses, *wall, &corpus)
    }));
    verdicts.push(run("C8", "determinism and trajectory prefix", None, || {
        let (exp, net, _, _) = trained.as_ref().map_err(|e| anyhow::anyhow!("{e}"))?;
        c8(exp, net)
    }));
    verdicts.push(run("C9", "conditional generation, DS and BLUR_G", None, || {
        let (exp, net, _, _) = trained.as_ref().map_err(|e| anyhow::anyhow!("{e}"))?;
        let mut out = c9_one(exp, net, &corpus, "ds")?;
        let blur_cfg = config(&["transform.kind=blur_gaussian", "transform.stages=3", "train.steps=3000"]);
        let blur_dir = TempDir::new()?;
        let (bexp, bnet, _, _) = train(&blur_cfg, &blur_dir)?;
        out.extend(c9_one(&bexp, &bnet, &corpus, "blur_gaussian")?);
        Ok(out)
    }));

    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.passed()).map(|v| v.id).collect();
    writeln!(std::io::stdout(), "acceptance: {} of {} criteria pass", verdicts.len() - failed.len(), verdicts.len()).unwrap();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
