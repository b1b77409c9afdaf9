//! The subcommands, as library functions the binary and the tests share.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use fdm_core::sampler::{conditional_generate, generate_seeds, SamplerConfig};
use fdm_core::schedules::NoiseSchedule;
use fdm_core::transforms::TransformKind;
use fdm_core::Tensor;
use rand::Rng as _;
use serde::Serialize;
use serde_json::json;

use crate::checks::{self, Check};
use crate::config::ExperimentConfig;
use crate::corpus::{self, corpus_hash};
use crate::experiment::{self, sheet_columns, shape_dims, to_image_space, usage, Experiment};
use crate::formats::{read_tensor, write_atomic, write_tensor, Checkpoint};
use crate::imaging::{contact_sheet, write_png, write_sidecar};

pub const LOG_FILE: &str = "train_log.csv";
pub const LATEST_CHECKPOINT: &str = "checkpoint.fdmc";

fn load_corpus(cfg: &ExperimentConfig) -> anyhow::Result<Vec<Tensor>> {
    corpus::load(&cfg.corpus, cfg.image_size, cfg.channels, cfg.corpus_seed)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub first_step: u64,
    pub final_step: u64,
    /// Losses of the steps run by this invocation.
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub corpus_hash: String,
}

/// Log rows of an earlier run that precede `step`, and the wall time they
/// reached.
fn existing_log(path: &Path, step: u64) -> anyhow::Result<(Vec<String>, f64)> {
    let mut rows = Vec::new();
    let mut wall = 0.0;
    if !path.exists() {
        return Ok((rows, wall));
    }
    for line in BufReader::new(File::open(path)?).lines().skip(1) {
        let line = line?;
        let cols: Vec<&str> = line.split(',').collect();
        let Some(s) = cols.first().and_then(|c| c.parse::<u64>().ok()) else {
            continue;
        };
        if s <= step {
            wall = cols.get(2).and_then(|c| c.parse().ok()).unwrap_or(wall);
            rows.push(line);
        }
    }
    Ok((rows, wall))
}

/// Runs the training loop to `train.steps`, resuming from `resume` when
/// given. Log rows are `step` (1-based count of completed steps), `loss`
/// and `wall_time` in seconds, cumulative across resumes.
pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>, progress: &mut dyn Write) -> anyhow::Result<TrainSummary> {
    let data = load_corpus(cfg)?;
    let hash = corpus_hash(&data);
    let (exp, mut state) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let exp = Experiment::from_checkpoint(cfg, &ck)?;
            let state = exp.restore_state(&ck)?;
            (exp, state)
        }
        None => {
            let exp = Experiment::from_corpus(cfg, &data)?.canonical()?;
            let state = exp.new_train_state()?;
            (exp, state)
        }
    };
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    let run = json!({
        "config_hash": cfg.hash(),
        "corpus_hash": hash,
        "corpus_size": data.len(),
        "gammas": exp.stack.gammas(),
        "rescale": exp.ns.rescale(),
        "parameters": state.net.num_params(),
    });
    write_atomic(&out.join("run.json"), serde_json::to_string_pretty(&run)?.as_bytes())?;

    let log_path = out.join(LOG_FILE);
    let (rows, wall_offset) = if resume.is_some() {
        existing_log(&log_path, state.step)?
    } else {
        (Vec::new(), 0.0)
    };
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "step,loss,wall_time")?;
    for r in rows {
        writeln!(log, "{r}")?;
    }

    let first_step = state.step;
    writeln!(
        progress,
        "training {} parameters from step {first_step} to {}; corpus {} images, hash {}",
        state.net.num_params(),
        cfg.train_steps,
        data.len(),
        &hash[..16]
    )?;
    let start = Instant::now();
    let latest = out.join(LATEST_CHECKPOINT);
    let mut losses = Vec::new();
    let save = |state: &fdm_core::trainer::TrainState| -> anyhow::Result<()> {
        let ck = exp.checkpoint(state);
        ck.save(&out.join(format!("checkpoint_{:07}.fdmc", state.step)))?;
        ck.save(&latest)?;
        Ok(())
    };
    while state.step < cfg.train_steps {
        let batch: Vec<Tensor> = (0..cfg.train.batch_size)
            .map(|_| data[state.rng.gen_range(0..data.len())].clone())
            .collect();
        let report = state.train_step(&exp.stack, &exp.ns, &batch)?;
        losses.push(report.loss);
        let step = report.step + 1;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            let wall = wall_offset + start.elapsed().as_secs_f64();
            writeln!(log, "{step},{},{wall:.3}", report.loss)?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            log.flush()?;
            save(&state)?;
            writeln!(progress, "step {step}: loss {:.6e}, checkpoint written", report.loss)?;
        }
    }
    log.flush()?;
    if cfg.checkpoint_every == 0 || state.step % cfg.checkpoint_every != 0 || state.step == first_step {
        save(&state)?;
    }
    writeln!(
        progress,
        "done at step {} ({} skipped) in {:.1}s",
        state.step,
        state.skipped,
        start.elapsed().as_secs_f64()
    )?;
    Ok(TrainSummary {
        first_step,
        final_step: state.step,
        losses,
        checkpoint: latest,
        corpus_hash: hash,
    })
}

/// Reads the `loss` column of a training log.
pub fn read_log_losses(path: &Path) -> anyhow::Result<Vec<(u64, f64)>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines().skip(1) {
        let line = line?;
        let mut cols = line.split(',');
        let step = cols.next().context("missing step")?.parse()?;
        let loss = cols.next().context("missing loss")?.parse()?;
        out.push((step, loss));
    }
    Ok(out)
}

fn load_for_sampling(cfg: &ExperimentConfig, checkpoint: &Path) -> anyhow::Result<(Experiment, fdm_core::denoiser::Denoiser, Checkpoint)> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let exp = Experiment::from_checkpoint(cfg, &ck)?;
    let net = exp.ema_net(&ck)?;
    Ok((exp, net, ck))
}

fn writable_as_png(channels: usize) -> bool {
    channels == 1 || channels == 3
}

/// Writes `<stem>.fdmt`, `<stem>.png` (when the channel count allows) and
/// `<stem>.json`.
fn write_artifact(dir: &Path, stem: &str, t: &Tensor, meta: &serde_json::Value) -> anyhow::Result<PathBuf> {
    let png = dir.join(format!("{stem}.png"));
    write_tensor(&dir.join(format!("{stem}.fdmt")), &shape_dims(t.shape()), t.data())?;
    if writable_as_png(t.shape().channels) {
        write_png(&png, t)?;
    }
    write_sidecar(&png, meta)?;
    Ok(png)
}

fn sampler_meta(cfg: &SamplerConfig, hash: &str, step: u64) -> serde_json::Value {
    json!({
        "eta": cfg.eta,
        "dt": cfg.dt,
        "zeta": format!("{:?}", cfg.zeta).to_lowercase(),
        "config_hash": hash,
        "checkpoint_step": step,
    })
}

fn merge(mut a: serde_json::Value, b: serde_json::Value) -> serde_json::Value {
    if let (Some(a), serde_json::Value::Object(b)) = (a.as_object_mut(), b) {
        a.extend(b);
    }
    a
}

/// `n` samples with seeds `sample.seed + i`, written to `<output>/samples`.
/// More than one sample also produces a contact sheet.
pub fn cmd_sample(cfg: &ExperimentConfig, checkpoint: &Path, n: usize) -> anyhow::Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(usage("sample count must be positive"));
    }
    let (exp, net, ck) = load_for_sampling(cfg, checkpoint)?;
    let scfg = exp.sampler_config();
    let seeds: Vec<u64> = (0..n as u64).map(|i| scfg.seed.wrapping_add(i)).collect();
    let samples = generate_seeds(&net, &exp.stack, &exp.ns, &scfg, &seeds, &mut |_, _, _| {})?;
    let dir = cfg.output_dir.join("samples");
    let base = sampler_meta(&scfg, &cfg.hash(), ck.step);
    let mut paths = Vec::with_capacity(n);
    for (s, seed) in samples.iter().zip(&seeds) {
        let meta = merge(base.clone(), json!({ "seed": seed }));
        paths.push(write_artifact(&dir, &format!("sample_{seed:06}"), s, &meta)?);
    }
    if n > 1 && writable_as_png(cfg.channels) {
        let sheet = contact_sheet(&samples, sheet_columns(n), 64)?;
        let path = dir.join("contact_sheet.png");
        write_png(&path, &sheet)?;
        write_sidecar(&path, &merge(base, json!({ "seeds": seeds })))?;
    }
    Ok(paths)
}

/// Conditions from explicit files (`.fdmt` stage tensors or `.png` images,
/// degraded to the condition stage) or else the first `n` corpus images.
pub fn load_conditions(exp: &Experiment, files: &[PathBuf], n: usize) -> anyhow::Result<(Vec<Tensor>, Vec<String>)> {
    let cfg = &exp.config;
    let kc = cfg.cond.stage;
    let shape = exp.stack.shape(kc);
    if files.is_empty() {
        let data = load_corpus(cfg)?;
        if data.len() < n {
            bail!("corpus has {} images, {n} conditions requested", data.len());
        }
        let conds = data[..n]
            .iter()
            .map(|x| exp.stack.forward_to_stage(x, kc))
            .collect::<Result<Vec<_>, _>>()?;
        let names = (0..n).map(|i| format!("corpus[{i}]")).collect();
        return Ok((conds, names));
    }
    let mut conds = Vec::new();
    for f in files {
        let is_png = f.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let t = if is_png {
            let img = image::open(f).with_context(|| format!("decoding {}", f.display()))?;
            let x = corpus::ingest_image(&img, cfg.image_size, cfg.channels)?;
            exp.stack.forward_to_stage(&x, kc)?
        } else {
            let (dims, data) = read_tensor(f).with_context(|| format!("reading {}", f.display()))?;
            if dims != shape_dims(shape) {
                return Err(usage(format!("{}: dims {dims:?}, stage {kc} needs {shape}", f.display())));
            }
            Tensor::from_vec(shape, data)?
        };
        conds.push(t);
    }
    Ok((conds, files.iter().map(|f| f.display().to_string()).collect()))
}

/// Conditional generation from stage `cond.stage`, written to
/// `<output>/condgen` next to an image-space view of every condition.
pub fn cmd_condgen(cfg: &ExperimentConfig, checkpoint: &Path, files: &[PathBuf], n: usize) -> anyhow::Result<Vec<PathBuf>> {
    let (exp, net, ck) = load_for_sampling(cfg, checkpoint)?;
    let n = if files.is_empty() { n } else { files.len() };
    if n == 0 {
        return Err(usage("need at least one condition"));
    }
    let (conds, names) = load_conditions(&exp, files, n)?;
    let scfg = SamplerConfig {
        cond: Some(cfg.cond),
        ..exp.sampler_config()
    };
    let outs = conditional_generate(&net, &exp.stack, &exp.ns, &scfg, &conds)?;
    let dir = cfg.output_dir.join("condgen");
    let base = merge(
        sampler_meta(&scfg, &cfg.hash(), ck.step),
        json!({ "cond_stage": cfg.cond.stage, "lambda": cfg.cond.lambda, "n_init": cfg.cond.n_init }),
    );
    let mut paths = Vec::with_capacity(n);
    let mut tiles = Vec::new();
    for (i, ((out, cond), name)) in outs.iter().zip(&conds).zip(&names).enumerate() {
        let seed = scfg.seed.wrapping_add(i as u64);
        let meta = merge(base.clone(), json!({ "seed": seed, "condition": name }));
        let view = to_image_space(&exp.stack, cond, cfg.cond.stage)?;
        write_artifact(&dir, &format!("cond_{i:04}_input"), &view, &meta)?;
        write_tensor(&dir.join(format!("cond_{i:04}_condition.fdmt")), &shape_dims(cond.shape()), cond.data())?;
        paths.push(write_artifact(&dir, &format!("cond_{i:04}"), out, &meta)?);
        tiles.push(view);
        tiles.push(out.clone());
    }
    if n > 1 && writable_as_png(cfg.channels) {
        let sheet = contact_sheet(&tiles, 2 * sheet_columns(n).min(8), 64)?;
        let path = dir.join("contact_sheet.png");
        write_png(&path, &sheet)?;
        write_sidecar(&path, &base)?;
    }
    Ok(paths)
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Monte-Carlo draws per estimate.
    pub draws: usize,
    /// Multiplies the rescale factor `r_1` (fault injection).
    pub corrupt_rescale: Option<f64>,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            draws: 100_000,
            corrupt_rescale: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub config_hash: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

/// Schedule curves on a uniform grid of 1001 points: `t,alpha,sigma,stage`.
pub fn schedule_curves(ns: &NoiseSchedule) -> anyhow::Result<String> {
    let mut out = String::from("t,alpha,sigma,stage\n");
    for i in 0..=1000 {
        let t = i as f64 / 1000.0;
        let k = ns.stages().stage_of(t)?;
        let (a, s) = ns.eval_in_stage(t, k);
        out.push_str(&format!("{t:.3},{a:.9},{s:.9},{k}\n"));
    }
    Ok(out)
}

/// Runs the invariant suites against the configured stack and schedule.
pub fn cmd_verify(cfg: &ExperimentConfig, opts: &VerifyOptions) -> anyhow::Result<(Report, Experiment)> {
    let data = load_corpus(cfg)?;
    let mut exp = Experiment::from_corpus(cfg, &data)?;
    if let Some(f) = opts.corrupt_rescale {
        if exp.stack.k() == 0 {
            return Err(usage("--corrupt-rescale needs at least one boundary"));
        }
        let mut r = exp.ns.rescale().to_vec();
        r[1] *= f;
        exp.ns = NoiseSchedule::with_rescale(exp.ns.stages().clone(), r, exp.ns.mode())?;
    }
    let (stack, ns) = (&exp.stack, &exp.ns);
    let mut checks = checks::schedule_algebra(ns, &stack.dims(), stack.gammas(), 10_000, opts.seed)?;
    checks.push(checks::time_grid_hits_boundaries(ns.stages(), cfg.dt));
    if cfg.kind != TransformKind::LinearAe {
        let signal = &data[..data.len().min(256)];
        checks.extend(checks::boundary_snr(stack, ns, signal, cfg.zeta, opts.draws, opts.seed)?);
    }
    let (pstack, pns, px) = checks::probe_setup(cfg.kind, ns.stages(), cfg.rescale, opts.seed)?;
    checks.extend(checks::process_consistency(&pstack, &pns, &px, opts.draws, opts.seed)?);
    checks.push(checks::posterior_grid_bayes(ns)?);
    checks.extend(checks::boundary_operators(stack, opts.draws, opts.seed)?);
    if stack.k() == 0 {
        let mut net = exp.new_net()?;
        checks::perturb(&mut net, 0.05, opts.seed);
        for eta in [0.0, 1.0] {
            checks.push(checks::k0_reduction(&net, stack, ns, eta, cfg.dt, opts.seed)?);
        }
    }
    let report = Report {
        config_hash: cfg.hash(),
        passed: checks::all_passed(&checks),
        checks,
    };
    Ok((report, exp))
}

/// `(k, γ_k)` for every boundary, estimated on the corpus.
pub fn cmd_estimate_gamma(cfg: &ExperimentConfig) -> anyhow::Result<Vec<(usize, f64)>> {
    let data = load_corpus(cfg)?;
    let gammas = experiment::estimate_gammas(cfg, &data)?;
    Ok(gammas.into_iter().enumerate().map(|(i, g)| (i + 1, g)).collect())
}
