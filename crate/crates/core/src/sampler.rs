//! Reverse diffusion across stages (unified DDPM/DDIM) and conditional
//! generation from a degraded signal with gradient-based initialization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;

use crate::denoiser::{x_from_eps, Denoiser, DenoiserOutput, Parameterization};
use crate::diffusion::{
    boundary_reverse, reverse_posterior, sample_full_noise, FullNoise, LatentState, ZetaMode,
};
use crate::error::invalid;
use crate::schedules::{NoiseSchedule, StageSchedule};
use crate::transforms::TransformStack;
use crate::{rng, Error, Result, Rng, Shape, Tensor};

/// Latents per network call while sampling.
const CHUNK: usize = 32;

/// What the sampler needs from a denoiser.
pub trait Denoise {
    fn predict_batch(
        &self,
        ns: &NoiseSchedule,
        zs: &[&Tensor],
        times: &[f64],
        k: usize,
    ) -> Result<Vec<DenoiserOutput>>;

    /// Gradient of `⟨g_x, x_θ(z)⟩` with respect to `z`.
    fn x_input_grad(&self, ns: &NoiseSchedule, z: &LatentState, g_x: &Tensor) -> Result<Tensor>;

    fn parameterization(&self) -> Parameterization;
}

impl Denoise for Denoiser<f32> {
    fn predict_batch(
        &self,
        ns: &NoiseSchedule,
        zs: &[&Tensor],
        times: &[f64],
        k: usize,
    ) -> Result<Vec<DenoiserOutput>> {
        Denoiser::predict_batch(self, ns, zs, times, k)
    }

    fn x_input_grad(&self, ns: &NoiseSchedule, z: &LatentState, g_x: &Tensor) -> Result<Tensor> {
        Denoiser::x_input_grad(self, ns, z, g_x)
    }

    fn parameterization(&self) -> Parameterization {
        self.config().parameterization
    }
}

/// Starting a trajectory from a condition `x_c` given at stage `stage`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CondSpec {
    pub stage: usize,
    /// Initial gradient step size.
    pub lambda: f64,
    /// Number of gradient steps on `‖x_θ(z_T) − g(x_c)‖²`.
    pub n_init: usize,
}

impl Default for CondSpec {
    fn default() -> Self {
        Self {
            stage: 1,
            lambda: 0.1,
            n_init: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub eta: f64,
    pub dt: f64,
    pub seed: u64,
    pub zeta: ZetaMode,
    pub cond: Option<CondSpec>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            dt: 0.004,
            seed: 0,
            zeta: ZetaMode::Average,
            cond: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(invalid("eta must lie in [0, 1]"));
        }
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(invalid("dt must lie in (0, 1]"));
        }
        let steps = 1.0 / self.dt;
        if Float::abs(steps - Float::round(steps)) > 1e-6 * steps {
            return Err(invalid(format!("1/dt = {steps} is not an integer")));
        }
        if let Some(c) = &self.cond {
            if !(c.lambda > 0.0 && c.lambda.is_finite()) {
                return Err(invalid("lambda must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-stage descending time points from `τ_{k+1}` to `τ_k`, both included.
/// Each stage is split uniformly into `round(width / dt)` steps (at least 1),
/// so every boundary is a grid point.
pub fn time_grid(stages: &StageSchedule, dt: f64) -> Vec<Vec<f64>> {
    (0..stages.num_stages())
        .map(|k| {
            let (lo, hi) = stages.span(k);
            let n = (Float::round((hi - lo) / dt) as usize).max(1);
            (0..=n)
                .rev()
                .map(|j| {
                    if j == n {
                        hi
                    } else if j == 0 {
                        lo
                    } else {
                        lo + (hi - lo) * j as f64 / n as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// The stream of fresh per-step noise for the trajectory with `seed`;
/// independent of the stream behind the trajectory's full-size noise.
pub fn fresh_noise_rng(seed: u64) -> Rng {
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

fn init_noise_rng(seed: u64) -> Rng {
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(2);
    r
}

/// One trajectory's state.
struct Trajectory {
    z: Tensor,
    full: FullNoise,
    fresh: Rng,
}

/// Observation hook: `(stage, time, latents)` after initialization and after
/// every update of `z`.
pub type Observer<'a> = dyn FnMut(usize, f64, &[Tensor]) + 'a;

fn predict_chunked<D: Denoise + ?Sized>(
    den: &D,
    ns: &NoiseSchedule,
    trajs: &[Trajectory],
    t: f64,
    k: usize,
) -> Result<Vec<DenoiserOutput>> {
    let mut out = Vec::with_capacity(trajs.len());
    for chunk in trajs.chunks(CHUNK) {
        let zs: Vec<&Tensor> = chunk.iter().map(|tr| &tr.z).collect();
        out.extend(den.predict_batch(ns, &zs, &vec![t; zs.len()], k)?);
    }
    Ok(out)
}

/// `x_θ` for the sampler: the network's stable estimate, or the explicit
/// inversion (with its clamp near `t = 1`) for a plain ε-predictor.
fn denoised<D: Denoise + ?Sized>(
    den: &D,
    ns: &NoiseSchedule,
    o: &DenoiserOutput,
    z: &Tensor,
    t: f64,
    k: usize,
    dt: f64,
) -> Result<Tensor> {
    match den.parameterization() {
        Parameterization::Velocity => Ok(o.x.clone()),
        Parameterization::Epsilon => {
            let state = LatentState { z: z.clone(), t, k };
            x_from_eps(ns, &state, &o.eps, dt)
        }
    }
}

/// Runs stages `start..=0` from `t = τ_{start+1}`.
fn run<D: Denoise + ?Sized>(
    den: &D,
    stack: &TransformStack,
    ns: &NoiseSchedule,
    cfg: &SamplerConfig,
    trajs: &mut [Trajectory],
    start: usize,
    observe: &mut Observer<'_>,
) -> Result<Vec<Tensor>> {
    let grid = time_grid(ns.stages(), cfg.dt);
    let big_k = stack.k();
    let mut result = Vec::new();
    for k in (0..=start).rev() {
        let times = &grid[k];
        let tau = times[times.len() - 1];
        for j in 0..times.len() - 1 {
            let (t, s) = (times[j], times[j + 1]);
            let preds = predict_chunked(den, ns, trajs, t, k)?;
            let last = s == tau;
            let mut estimates = Vec::with_capacity(trajs.len());
            for (tr, o) in trajs.iter_mut().zip(&preds) {
                let x = denoised(den, ns, o, &tr.z, t, k, cfg.dt)?;
                let delta = if k == big_k {
                    Tensor::zeros(o.delta.shape())
                } else {
                    o.delta.clone()
                };
                if last {
                    estimates.push(x.add(&delta)?);
                    continue;
                }
                let step = reverse_posterior(ns, &x, &delta, s, t, k, cfg.eta)?;
                let noise = if step.fresh != 0.0 {
                    Some(rng::standard_normal_tensor(&mut tr.fresh, tr.z.shape()))
                } else {
                    None
                };
                tr.z = step.sample(&o.eps, noise.as_ref())?;
            }
            if last {
                if k == 0 {
                    result = estimates;
                } else {
                    let fine = stack.shape(k - 1);
                    let (a, sg) = ns.eval_in_stage(tau, k - 1);
                    for ((tr, o), est) in trajs.iter_mut().zip(&preds).zip(&estimates) {
                        let eps_rs = boundary_reverse(
                            &o.eps,
                            &mut tr.full,
                            k,
                            stack.partition(k),
                            cfg.zeta,
                            fine,
                        )?;
                        tr.z = stack.g_map(est, k)?.lincomb(a, &eps_rs, sg)?;
                    }
                }
            }
            if let Some(i) = trajs.iter().position(|tr| !tr.z.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "trajectory {i} at stage {k}, t={t} -> s={s}"
                )));
            }
            let zs: Vec<Tensor> = trajs.iter().map(|tr| tr.z.clone()).collect();
            if !(last && k == 0) {
                let (stage, time) = if last { (k - 1, s) } else { (k, s) };
                observe(stage, time, &zs);
            }
        }
    }
    Ok(result)
}

/// Unconditional samples, one per seed, generated as a batch. Trajectory `i`
/// draws its full-size noise from `seeds[i]`.
pub fn generate_seeds<D: Denoise + ?Sized>(
    den: &D,
    stack: &TransformStack,
    ns: &NoiseSchedule,
    cfg: &SamplerConfig,
    seeds: &[u64],
    observe: &mut Observer<'_>,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let fulls: Vec<FullNoise> = seeds.iter().map(|&s| sample_full_noise(stack, s)).collect();
    generate_with_noise(den, stack, ns, cfg, fulls, observe)
}

/// Unconditional samples from explicitly given full-size noises; the fresh
/// per-step noise of each trajectory follows the noise's seed.
pub fn generate_with_noise<D: Denoise + ?Sized>(
    den: &D,
    stack: &TransformStack,
    ns: &NoiseSchedule,
    cfg: &SamplerConfig,
    fulls: Vec<FullNoise>,
    observe: &mut Observer<'_>,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let big_k = stack.k();
    let (_, s1) = ns.eval_in_stage(1.0, big_k);
    let mut trajs: Vec<Trajectory> = fulls
        .into_iter()
        .map(|full| {
            let mut full = full;
            full.rewind();
            Trajectory {
                z: full.base().scale(s1 as f32),
                fresh: fresh_noise_rng(full.seed()),
                full,
            }
        })
        .collect();
    let zs: Vec<Tensor> = trajs.iter().map(|tr| tr.z.clone()).collect();
    observe(big_k, 1.0, &zs);
    run(den, stack, ns, cfg, &mut trajs, big_k, observe)
}

/// `n` samples with seeds `cfg.seed, cfg.seed + 1, …`.
pub fn generate<D: Denoise + ?Sized>(
    den: &D,
    stack: &TransformStack,
    ns: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<Tensor>> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    generate_seeds(den, stack, ns, cfg, &seeds, &mut |_, _, _| {})
}

/// Result of the gradient-based initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct CondInit {
    pub z: LatentState,
    /// Objective before the first and after every accepted step.
    pub objective: Vec<f64>,
}

/// `T = τ_{stage}`: the condition `x_c = x^{stage}` is what the process
/// would hold at the end of stage `stage`, so the trajectory resumes in
/// stage `stage − 1` from `z_T = α_T g(x_c) + σ_T ε`, refined by gradient
/// steps on `‖x_θ(z_T) − g(x_c)‖²` that halve `λ` whenever the objective
/// would increase.
pub fn conditional_init<D: Denoise + ?Sized>(
    den: &D,
    stack: &TransformStack,
    ns: &NoiseSchedule,
    x_c: &Tensor,
    cond: &CondSpec,
    rng: &mut Rng,
) -> Result<CondInit> {
    let kc = cond.stage;
    if kc == 0 || kc > stack.k() {
        return Err(Error::StageOutOfRange {
            stage: kc,
            stages: stack.k() + 1,
        });
    }
    x_c.ensure_shape(stack.shape(kc))?;
    let k = kc - 1;
    let t = ns.stages().tau(kc);
    let target = stack.g_map(x_c, kc)?;
    let (a, s) = ns.eval_in_stage(t, k);
    let eps = rng::standard_normal_tensor(rng, target.shape());
    let mut z = LatentState {
        z: target.lincomb(a, &eps, s)?,
        t,
        k,
    };
    let objective_of = |z: &LatentState| -> Result<(f64, Tensor)> {
        let o = den.predict_batch(ns, &[&z.z], &[z.t], z.k)?.remove(0);
        let x = match den.parameterization() {
            Parameterization::Velocity => o.x,
            Parameterization::Epsilon => x_from_eps(ns, z, &o.eps, 0.0)?,
        };
        let r = x.sub(&target)?;
        Ok((r.data().iter().map(|&v| (v as f64) * (v as f64)).sum(), r))
    };
    let (mut f, mut resid) = objective_of(&z)?;
    let mut history = vec![f];
    let mut lambda = cond.lambda;
    for _ in 0..cond.n_init {
        let grad = den.x_input_grad(ns, &z, &resid.scale(2.0))?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("conditional-init gradient".into()));
        }
        let mut accepted = false;
        for _ in 0..30 {
            let cand = LatentState {
                z: z.z.lincomb(1.0, &grad, -lambda)?,
                ..z.clone()
            };
            let (fc, rc) = objective_of(&cand)?;
            if fc.is_finite() && fc <= f {
                z = cand;
                f = fc;
                resid = rc;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(f);
    }
    Ok(CondInit {
        z,
        objective: history,
    })
}

/// Conditional samples, one per condition. Trajectory `i` uses seed
/// `cfg.seed + i` for its initialization noise, full-size noise and fresh
/// noise. A condition at stage 0 is returned unchanged.
pub fn conditional_generate<D: Denoise + ?Sized>(
    den: &D,
    stack: &TransformStack,
    ns: &NoiseSchedule,
    cfg: &SamplerConfig,
    conditions: &[Tensor],
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let cond = cfg
        .cond
        .ok_or_else(|| invalid("conditional generation needs a condition spec"))?;
    if cond.stage == 0 {
        for c in conditions {
            c.ensure_shape(stack.shape(0))?;
        }
        return Ok(conditions.to_vec());
    }
    let mut trajs = Vec::with_capacity(conditions.len());
    for (i, x_c) in conditions.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64);
        let init = conditional_init(den, stack, ns, x_c, &cond, &mut init_noise_rng(seed))?;
        trajs.push(Trajectory {
            z: init.z.z,
            full: sample_full_noise(stack, seed),
            fresh: fresh_noise_rng(seed),
        });
    }
    run(den, stack, ns, cfg, &mut trajs, cond.stage - 1, &mut |_, _, _| {})
}

/// Shape of the latent a conditional trajectory starts from.
pub fn conditional_start_shape(stack: &TransformStack, stage: usize) -> Result<Shape> {
    if stage == 0 || stage > stack.k() {
        return Err(Error::StageOutOfRange {
            stage,
            stages: stack.k() + 1,
        });
    }
    Ok(stack.shape(stage - 1))
}
