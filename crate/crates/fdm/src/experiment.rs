//! Building the transform stack, noise schedule and network from a config,
//! and moving training state in and out of checkpoints.

use anyhow::{anyhow, bail, Context};
use fdm_core::denoiser::Denoiser;
use fdm_core::sampler::SamplerConfig;
use fdm_core::schedules::{NoiseSchedule, StageSchedule};
use fdm_core::trainer::{rng_from_state, rng_state, TrainState};
use fdm_core::transforms::{estimate_gamma, LinearAutoencoder, TransformKind, TransformStack};
use fdm_core::{Shape, Tensor};

use crate::config::{identity_diff, ExperimentConfig, GammaSpec};
use crate::formats::{Checkpoint, NamedTensor};

/// Images used for signal-power estimates and the autoencoder fit.
const FIT_IMAGES: usize = 512;

/// A configuration problem or incompatible artifact; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub stack: TransformStack,
    pub ns: NoiseSchedule,
}

pub fn stage_schedule(cfg: &ExperimentConfig) -> StageSchedule {
    StageSchedule::new(cfg.stages, cfg.stage_kind)
}

/// The stack before any signal-power ratios are applied.
fn base_stack(cfg: &ExperimentConfig, ae: Option<LinearAutoencoder>) -> anyhow::Result<TransformStack> {
    let image = cfg.image_shape();
    Ok(match cfg.kind {
        TransformKind::Downsample => TransformStack::downsample(image, cfg.stages)?,
        TransformKind::BlurUpsample => TransformStack::blur_upsample(image, cfg.stages)?,
        TransformKind::BlurGaussian => TransformStack::blur_gaussian(image, &stage_schedule(cfg))?,
        TransformKind::LinearAe => {
            TransformStack::linear_ae(ae.ok_or_else(|| anyhow!("linear_ae stack needs a fitted autoencoder"))?)
        }
    })
}

fn estimate_all(stack: &TransformStack, corpus: &[Tensor]) -> anyhow::Result<Vec<f64>> {
    let sample = &corpus[..corpus.len().min(FIT_IMAGES)];
    (1..=stack.k())
        .map(|k| estimate_gamma(stack, sample, k).map_err(Into::into))
        .collect()
}

/// Per-boundary signal-power ratios of the stack built from `cfg`.
pub fn estimate_gammas(cfg: &ExperimentConfig, corpus: &[Tensor]) -> anyhow::Result<Vec<f64>> {
    let ae = fit_autoencoder(cfg, corpus)?;
    estimate_all(&base_stack(cfg, ae)?, corpus)
}

fn fit_autoencoder(cfg: &ExperimentConfig, corpus: &[Tensor]) -> anyhow::Result<Option<LinearAutoencoder>> {
    if cfg.kind != TransformKind::LinearAe {
        return Ok(None);
    }
    let sample = &corpus[..corpus.len().min(FIT_IMAGES)];
    let ae = LinearAutoencoder::fit(sample, cfg.ae_latent, cfg.ae_sweeps, cfg.corpus_seed)
        .context("fitting the linear autoencoder")?;
    Ok(Some(ae))
}

impl Experiment {
    /// Fits what the config leaves to the data: the autoencoder and, when
    /// requested, the signal-power ratios.
    pub fn from_corpus(config: &ExperimentConfig, corpus: &[Tensor]) -> anyhow::Result<Self> {
        if corpus.is_empty() {
            bail!("corpus is empty");
        }
        let ae = fit_autoencoder(config, corpus)?;
        let stack = base_stack(config, ae)?;
        let gammas = match &config.gamma {
            GammaSpec::Values(v) => v.clone(),
            GammaSpec::Estimate => estimate_all(&stack, corpus)?,
            GammaSpec::Default if config.kind == TransformKind::LinearAe => estimate_all(&stack, corpus)?,
            GammaSpec::Default => stack.gammas().to_vec(),
        };
        Self::assemble(config, stack, gammas)
    }

    /// Rebuilds from the stack tensors stored in a checkpoint.
    pub fn from_checkpoint(config: &ExperimentConfig, ck: &Checkpoint) -> anyhow::Result<Self> {
        check_compatible(config, ck)?;
        let ae = match ck.tensor("stack.ae_encoder") {
            Some(t) => Some(LinearAutoencoder::from_encoder(config.image_shape(), config.ae_latent, t.data.clone())?),
            None => None,
        };
        let stack = base_stack(config, ae)?;
        let gammas = ck
            .tensor("stack.gammas")
            .ok_or_else(|| anyhow!("checkpoint lacks stack.gammas"))?
            .data
            .iter()
            .map(|&g| g as f64)
            .collect();
        Self::assemble(config, stack, gammas)
    }

    fn assemble(config: &ExperimentConfig, stack: TransformStack, gammas: Vec<f64>) -> anyhow::Result<Self> {
        let stack = stack.with_gammas(gammas)?;
        let ns = NoiseSchedule::new(stage_schedule(config), &stack.dims(), stack.gammas(), config.rescale)?;
        Ok(Self {
            config: config.clone(),
            stack,
            ns,
        })
    }

    pub fn new_net(&self) -> anyhow::Result<Denoiser<f32>> {
        Ok(Denoiser::new(self.config.model, self.stack.shapes(), self.config.model_seed)?)
    }

    pub fn new_train_state(&self) -> anyhow::Result<TrainState> {
        Ok(TrainState::new(self.new_net()?, self.config.train, self.config.train_seed)?)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            eta: self.config.eta,
            dt: self.config.dt,
            seed: self.config.sample_seed,
            zeta: self.config.zeta,
            cond: None,
        }
    }

    /// Gammas are stored as `f32`; they are applied after that rounding so
    /// a restored experiment is identical to the one that was saved.
    fn stack_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor {
            name: "stack.gammas".into(),
            dims: vec![self.stack.k()],
            data: self.stack.gammas().iter().map(|&g| g as f32).collect(),
        }];
        if let Some(ae) = self.stack.autoencoder() {
            out.push(NamedTensor {
                name: "stack.ae_encoder".into(),
                dims: vec![ae.latent_shape().numel(), ae.image_shape().numel()],
                data: ae.encoder().to_vec(),
            });
        }
        out
    }

    /// Rounds the gammas to their stored precision.
    pub fn canonical(self) -> anyhow::Result<Self> {
        let gammas: Vec<f64> = self.stack.gammas().iter().map(|&g| g as f32 as f64).collect();
        let Self { config, stack, .. } = self;
        Self::assemble(&config, stack, gammas)
    }

    pub fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        let mut tensors = self.stack_tensors();
        let layout = state.net.layout();
        for (prefix, values) in [
            ("params", state.net.params()),
            ("ema", &state.ema[..]),
            ("adam_m", &state.m[..]),
            ("adam_v", &state.v[..]),
        ] {
            for e in layout.entries() {
                tensors.push(NamedTensor {
                    name: format!("{prefix}.{}", e.name),
                    dims: e.dims.to_vec(),
                    data: values[e.range()].to_vec(),
                });
            }
        }
        Checkpoint {
            config_hash: self.config.hash(),
            config_text: self.config.identity_text(),
            step: state.step,
            skipped: state.skipped,
            rng: rng_state(&state.rng),
            tensors,
        }
    }

    fn gather(&self, ck: &Checkpoint, prefix: &str, template: &Denoiser<f32>) -> anyhow::Result<Vec<f32>> {
        let layout = template.layout();
        let mut out = vec![0.0f32; layout.total()];
        for e in layout.entries() {
            let name = format!("{prefix}.{}", e.name);
            let t = ck.tensor(&name).ok_or_else(|| anyhow!("checkpoint lacks {name}"))?;
            if t.dims != e.dims[..] {
                bail!("{name}: stored dims {:?}, expected {:?}", t.dims, e.dims);
            }
            out[e.range()].copy_from_slice(&t.data);
        }
        Ok(out)
    }

    /// Full optimizer state, for resuming.
    pub fn restore_state(&self, ck: &Checkpoint) -> anyhow::Result<TrainState> {
        check_compatible(&self.config, ck)?;
        let mut state = self.new_train_state()?;
        let params = self.gather(ck, "params", &state.net)?;
        state.ema = self.gather(ck, "ema", &state.net)?;
        state.m = self.gather(ck, "adam_m", &state.net)?;
        state.v = self.gather(ck, "adam_v", &state.net)?;
        state.net.set_params(params)?;
        state.step = ck.step;
        state.skipped = ck.skipped;
        state.rng = rng_from_state(&ck.rng);
        Ok(state)
    }

    /// The EMA network used for sampling.
    pub fn ema_net(&self, ck: &Checkpoint) -> anyhow::Result<Denoiser<f32>> {
        check_compatible(&self.config, ck)?;
        let mut net = self.new_net()?;
        let ema = self.gather(ck, "ema", &net)?;
        net.set_params(ema)?;
        Ok(net)
    }
}

/// Refuses a checkpoint trained under a different model identity, listing
/// the differing keys.
pub fn check_compatible(config: &ExperimentConfig, ck: &Checkpoint) -> anyhow::Result<()> {
    if ck.config_hash == config.hash() {
        return Ok(());
    }
    let diff = identity_diff(&ck.config_text, &config.identity_text());
    let detail = if diff.is_empty() {
        "stored identity text does not match its hash".to_string()
    } else {
        diff.iter().map(|d| format!("\n  {d}")).collect::<String>()
    };
    Err(usage(format!(
        "checkpoint config hash {} does not match {} (checkpoint -> current):{detail}",
        &ck.config_hash[..12.min(ck.config_hash.len())],
        &config.hash()[..12]
    )))
}

/// Maps a stage-`k` tensor back to image space through `g_k, …, g_1`.
pub fn to_image_space(stack: &TransformStack, x: &Tensor, k: usize) -> anyhow::Result<Tensor> {
    let mut cur = x.clone();
    for j in (1..=k).rev() {
        cur = stack.g_map(&cur, j)?;
    }
    Ok(cur)
}

/// `⌈√n⌉` columns.
pub fn sheet_columns(n: usize) -> usize {
    (n as f64).sqrt().ceil().max(1.0) as usize
}

pub fn shape_dims(s: Shape) -> Vec<usize> {
    vec![s.channels, s.height, s.width]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::blobs;

    fn small() -> ExperimentConfig {
        ExperimentConfig::default_config()
            .with_overrides(&[
                "transform.image_size=8",
                "corpus.source=blobs,n=8,size=8",
                "model.base_channels=4",
            ])
            .unwrap()
    }

    #[test]
    fn checkpoint_restores_training_state() {
        let cfg = small();
        let data = blobs(8, 8, 3, 0);
        let exp = Experiment::from_corpus(&cfg, &data).unwrap().canonical().unwrap();
        let mut state = exp.new_train_state().unwrap();
        state.train_step(&exp.stack, &exp.ns, &data[..4]).unwrap();
        let ck = Checkpoint::decode(&exp.checkpoint(&state).encode()[..]).unwrap();
        let exp2 = Experiment::from_checkpoint(&cfg, &ck).unwrap();
        assert_eq!(exp2.ns, exp.ns);
        let mut back = exp2.restore_state(&ck).unwrap();
        assert_eq!(back.net.params(), state.net.params());
        assert_eq!((back.ema.clone(), back.m.clone(), back.v.clone()), (state.ema.clone(), state.m.clone(), state.v.clone()));
        assert_eq!(exp2.ema_net(&ck).unwrap().params(), &state.ema[..]);
        let a = state.train_step(&exp.stack, &exp.ns, &data[4..]).unwrap();
        let b = back.train_step(&exp2.stack, &exp2.ns, &data[4..]).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.net.params(), state.net.params());
    }

    #[test]
    fn mismatched_checkpoint_is_refused_with_a_diff() {
        let cfg = small();
        let data = blobs(8, 8, 3, 0);
        let exp = Experiment::from_corpus(&cfg, &data).unwrap();
        let ck = exp.checkpoint(&exp.new_train_state().unwrap());
        let other = cfg.set("train.lr", "2e-3").unwrap();
        let err = Experiment::from_checkpoint(&other, &ck).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(err.to_string().contains("train.lr: 1e-3 -> 2e-3"), "{err}");
        // keys outside the model identity do not matter
        let fine = cfg.set("sample.eta", "0").unwrap();
        assert!(Experiment::from_checkpoint(&fine, &ck).is_ok());
    }

    #[test]
    fn autoencoder_round_trips_through_checkpoint() {
        let cfg = small()
            .with_overrides(&["transform.kind=linear_ae", "transform.stages=1", "transform.ae_latent=2x4x4", "transform.ae_sweeps=3"])
            .unwrap();
        let data = blobs(8, 8, 3, 0);
        let exp = Experiment::from_corpus(&cfg, &data).unwrap().canonical().unwrap();
        assert_ne!(exp.stack.gammas()[0], 1.0);
        let ck = exp.checkpoint(&exp.new_train_state().unwrap());
        let back = Experiment::from_checkpoint(&cfg, &ck).unwrap();
        assert_eq!(back.stack, exp.stack);
        assert_eq!(back.ns, exp.ns);
    }
}
