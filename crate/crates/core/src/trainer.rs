//! Double reconstruction loss with P2 weighting, its exact gradient, the
//! AdamW optimizer and the EMA of the weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;

use crate::denoiser::Denoiser;
use crate::error::invalid;
use crate::schedules::NoiseSchedule;
use crate::transforms::TransformStack;
use crate::{rng, Error, Real, Result, Rng, Tensor};

/// `ω_t = sigmoid(−log(α²/σ²)) = σ² / (α² + σ²)`.
pub fn p2_weight(ns: &NoiseSchedule, t: f64) -> Result<f64> {
    let (a, s) = ns.eval(t)?;
    let (a2, s2) = (a * a, s * s);
    Ok(if s2 == 0.0 { 0.0 } else { s2 / (a2 + s2) })
}

/// Per-sample randomness of the loss: the time and the stage-shaped noise.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraw {
    pub t: f64,
    pub eps: Tensor,
}

/// `t ~ U[0, 1]` and `ε ~ N(0, I)` at the shape of stage `stage_of(t)`.
pub fn draw_loss_samples(
    stack: &TransformStack,
    ns: &NoiseSchedule,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<LossDraw>> {
    (0..n)
        .map(|_| {
            let t = rng::uniform(rng);
            let k = ns.stages().stage_of(t)?;
            Ok(LossDraw {
                t,
                eps: rng::standard_normal_tensor(rng, stack.shape(k)),
            })
        })
        .collect()
}

/// `ω·(mse(x̂, x_t) + mse(δ̂, δ_t))` for one sample.
pub fn sample_loss(
    omega: f64,
    x_pred: &Tensor,
    x_t: &Tensor,
    delta_pred: &Tensor,
    delta_t: &Tensor,
) -> Result<f64> {
    Ok(omega * (x_pred.mse(x_t)? + delta_pred.mse(delta_t)?))
}

struct Prepared {
    k: usize,
    idx: Vec<usize>,
    z: Vec<f64>,
    times: Vec<f64>,
    x_t: Vec<f64>,
    delta_t: Vec<f64>,
    omega: Vec<f64>,
}

/// Noised inputs and targets, grouped by stage.
fn prepare(
    stack: &TransformStack,
    ns: &NoiseSchedule,
    x_batch: &[Tensor],
    draws: &[LossDraw],
) -> Result<Vec<Prepared>> {
    if x_batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if x_batch.len() != draws.len() {
        return Err(Error::LengthMismatch {
            expected: x_batch.len(),
            got: draws.len(),
        });
    }
    let mut groups: Vec<Prepared> = Vec::new();
    for (i, (x, d)) in x_batch.iter().zip(draws).enumerate() {
        let k = ns.stages().stage_of(d.t)?;
        let (x_t, delta_t) = stack.interpolated_target_in_stage(ns.stages(), x, d.t, k)?;
        let (a, s) = ns.eval_in_stage(d.t, k);
        d.eps.ensure_shape(stack.shape(k))?;
        let z = x_t.lincomb(a, &d.eps, s)?;
        let omega = p2_weight(ns, d.t)?;
        let g = match groups.iter().position(|g| g.k == k) {
            Some(g) => g,
            None => {
                groups.push(Prepared {
                    k,
                    idx: Vec::new(),
                    z: Vec::new(),
                    times: Vec::new(),
                    x_t: Vec::new(),
                    delta_t: Vec::new(),
                    omega: Vec::new(),
                });
                groups.len() - 1
            }
        };
        let g = &mut groups[g];
        g.idx.push(i);
        g.z.extend(z.data().iter().map(|&v| v as f64));
        g.times.push(d.t);
        g.x_t.extend(x_t.data().iter().map(|&v| v as f64));
        g.delta_t.extend(delta_t.data().iter().map(|&v| v as f64));
        g.omega.push(omega);
    }
    groups.sort_by_key(|g| g.k);
    Ok(groups)
}

fn to_real<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::c(x)).collect()
}

fn check_finite(loss: f64, g: &Prepared, i: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "loss at t={} stage={}",
            g.times[i], g.k
        )))
    }
}

/// Batch mean of the per-sample loss for fixed draws.
pub fn training_loss<T: Real>(
    net: &Denoiser<T>,
    stack: &TransformStack,
    ns: &NoiseSchedule,
    x_batch: &[Tensor],
    draws: &[LossDraw],
) -> Result<f64> {
    let groups = prepare(stack, ns, x_batch, draws)?;
    let mut total = 0.0;
    for g in &groups {
        let numel = stack.shape(g.k).numel();
        let out = net.forward(ns, &to_real::<T>(&g.z), &g.times, g.k)?;
        for i in 0..g.times.len() {
            let r = i * numel..(i + 1) * numel;
            let mut sx = 0.0;
            let mut sd = 0.0;
            for j in r {
                let dx = out.x[j].to_f64().unwrap() - g.x_t[j];
                let dd = out.delta[j].to_f64().unwrap() - g.delta_t[j];
                sx += dx * dx;
                sd += dd * dd;
            }
            let loss = g.omega[i] * (sx + sd) / numel as f64;
            check_finite(loss, g, i)?;
            total += loss;
        }
    }
    Ok(total / x_batch.len() as f64)
}

/// [`training_loss`] and its exact gradient with respect to every parameter.
pub fn grad_loss<T: Real>(
    net: &Denoiser<T>,
    stack: &TransformStack,
    ns: &NoiseSchedule,
    x_batch: &[Tensor],
    draws: &[LossDraw],
) -> Result<(f64, Vec<T>)> {
    let groups = prepare(stack, ns, x_batch, draws)?;
    let batch = x_batch.len() as f64;
    let mut grads = vec![T::zero(); net.num_params()];
    let mut total = 0.0;
    for g in &groups {
        let numel = stack.shape(g.k).numel();
        let mut losses = Vec::with_capacity(g.times.len());
        net.forward_backward(
            ns,
            &to_real::<T>(&g.z),
            &g.times,
            g.k,
            |out| {
                let n = g.times.len();
                let mut gx = vec![T::zero(); n * numel];
                let mut gd = vec![T::zero(); n * numel];
                for i in 0..n {
                    let scale = 2.0 * g.omega[i] / (numel as f64 * batch);
                    let (mut sx, mut sd) = (0.0, 0.0);
                    for j in i * numel..(i + 1) * numel {
                        let dx = out.x[j].to_f64().unwrap() - g.x_t[j];
                        let dd = out.delta[j].to_f64().unwrap() - g.delta_t[j];
                        sx += dx * dx;
                        sd += dd * dd;
                        gx[j] = T::c(scale * dx);
                        gd[j] = T::c(scale * dd);
                    }
                    losses.push(g.omega[i] * (sx + sd) / numel as f64);
                }
                (vec![T::zero(); n * numel], gd, gx)
            },
            &mut grads,
        )?;
        for (i, &l) in losses.iter().enumerate() {
            check_finite(l, g, i)?;
            total += l;
        }
    }
    Ok((total / batch, grads))
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut [f32], params: &[f32], decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: ema.len(),
            got: params.len(),
        });
    }
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = (decay * *e as f64 + (1.0 - decay) * p as f64) as f32;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    /// Use `min(decay, (1 + n)/(10 + n))` at step `n` so short runs still
    /// get a useful average.
    pub ema_warmup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 16,
            ema_decay: 0.9999,
            ema_warmup: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be positive"));
        }
        if !unit(self.beta1) || !unit(self.beta2) || !unit(self.ema_decay) {
            return Err(invalid("betas and ema_decay must lie in [0, 1]"));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("adam_eps must be positive and weight_decay non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }

    /// The EMA decay applied at the update that ends step `step` (0-based).
    pub fn ema_decay_at(&self, step: u64) -> f64 {
        if self.ema_warmup {
            let n = step as f64;
            self.ema_decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.ema_decay
        }
    }
}

/// Serializable position of the trainer's random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn rng_state(r: &Rng) -> RngState {
    RngState {
        seed: r.get_seed(),
        stream: r.get_stream(),
        word_pos: r.get_word_pos(),
    }
}

pub fn rng_from_state(s: &RngState) -> Rng {
    let mut r = Rng::from_seed(s.seed);
    r.set_stream(s.stream);
    r.set_word_pos(s.word_pos);
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    /// The update was skipped because the loss or gradient was not finite.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: Denoiser<f32>,
    pub ema: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub skipped: u64,
    pub config: TrainConfig,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(net: Denoiser<f32>, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = net.num_params();
        Ok(Self {
            ema: net.params().to_vec(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            net,
            step: 0,
            skipped: 0,
            config,
            rng: rng::seeded(seed),
        })
    }

    /// The network with the EMA weights.
    pub fn ema_net(&self) -> Denoiser<f32> {
        let mut net = self.net.clone();
        net.params_mut().copy_from_slice(&self.ema);
        net
    }

    /// One AdamW update with decoupled weight decay.
    pub fn apply_gradients(&mut self, grads: &[f32]) -> Result<()> {
        let n = self.net.num_params();
        if grads.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: grads.len(),
            });
        }
        let c = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - Float::powi(c.beta1, t);
        let bc2 = 1.0 - Float::powi(c.beta2, t);
        let params = self.net.params_mut();
        for i in 0..n {
            let g = grads[i] as f64;
            let m = c.beta1 * self.m[i] as f64 + (1.0 - c.beta1) * g;
            let v = c.beta2 * self.v[i] as f64 + (1.0 - c.beta2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let p = params[i] as f64;
            let update = (m / bc1) / (Float::sqrt(v / bc2) + c.adam_eps);
            params[i] = (p - c.lr * (update + c.weight_decay * p)) as f32;
        }
        Ok(())
    }

    /// Draws `(t, ε)` for the batch, takes one optimizer step and updates the
    /// EMA. A non-finite loss or gradient skips the update but still counts
    /// the step.
    pub fn train_step(
        &mut self,
        stack: &TransformStack,
        ns: &NoiseSchedule,
        x_batch: &[Tensor],
    ) -> Result<StepReport> {
        let draws = draw_loss_samples(stack, ns, x_batch.len(), &mut self.rng)?;
        let step = self.step;
        let result = grad_loss(&self.net, stack, ns, x_batch, &draws);
        let (loss, skipped) = match result {
            Ok((loss, grads)) if grads.iter().all(|g| g.is_finite()) => {
                self.apply_gradients(&grads)?;
                let decay = self.config.ema_decay_at(step);
                ema_update(&mut self.ema, self.net.params(), decay)?;
                (loss, false)
            }
            Ok((loss, _)) => (loss, true),
            Err(Error::NonFinite(_)) => (f64::NAN, true),
            Err(e) => return Err(e),
        };
        if skipped {
            self.skipped += 1;
        }
        self.step += 1;
        Ok(StepReport {
            step,
            loss,
            skipped,
        })
    }
}
