//! Measured invariant checks. Each check reports the measured value next to
//! its bound so that failures carry their numbers.

use std::f64::consts::FRAC_PI_2;

use anyhow::{bail, Context};
use fdm_core::denoiser::{x_from_eps, Denoiser, Parameterization};
use fdm_core::diffusion::{
    boundary_forward, boundary_reverse, q_sample_in_stage, q_transition, reverse_posterior,
    sample_full_noise, FullNoise, LatentState, ZetaMode,
};
use fdm_core::sampler::{
    conditional_generate, conditional_init, fresh_noise_rng, generate_seeds, generate_with_noise,
    time_grid, CondSpec, Denoise, SamplerConfig,
};
use fdm_core::schedules::{patch_power, NoiseSchedule, PatchSpec, RescaleMode, StageSchedule};
use fdm_core::trainer::{draw_loss_samples, grad_loss, training_loss};
use fdm_core::transforms::{LinearAutoencoder, TransformKind, TransformStack};
use fdm_core::{seeded, Real, standard_normal, standard_normal_tensor, standard_normal_vec, uniform, Shape, Tensor};
use serde::Serialize;

use crate::corpus::{blobs, Moments};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub detail: String,
}

impl Check {
    pub fn within(name: impl Into<String>, measured: f64, lower: Option<f64>, upper: Option<f64>, detail: impl Into<String>) -> Self {
        // NaN fails both comparisons
        let passed = !measured.is_nan()
            && lower.is_none_or(|l| measured >= l)
            && upper.is_none_or(|u| measured <= u);
        Self {
            name: name.into(),
            passed,
            measured,
            lower,
            upper,
            detail: detail.into(),
        }
    }

    pub fn at_most(name: impl Into<String>, measured: f64, limit: f64, detail: impl Into<String>) -> Self {
        Self::within(name, measured, None, Some(limit), detail)
    }

    pub fn at_least(name: impl Into<String>, measured: f64, limit: f64, detail: impl Into<String>) -> Self {
        Self::within(name, measured, Some(limit), None, detail)
    }

    pub fn line(&self) -> String {
        let bound = match (self.lower, self.upper) {
            (Some(l), Some(u)) => format!("in [{l}, {u}]"),
            (Some(l), None) => format!(">= {l}"),
            (None, Some(u)) => format!("<= {u}"),
            (None, None) => String::new(),
        };
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!("{verdict} {}: {:.6e} {bound}", self.name, self.measured);
        if !self.detail.is_empty() {
            s.push_str(&format!(" ({})", self.detail));
        }
        s
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

/// VP closure, Chapman–Kolmogorov composition of the in-stage transition,
/// and the signal-preserved noise jump `1/sqrt(d_k γ_k)` at every boundary.
pub fn schedule_algebra(ns: &NoiseSchedule, dims: &[usize], gammas: &[f64], draws: usize, seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut r = seeded(seed);
    let stages = ns.stages();
    let mut out = Vec::new();
    if ns.mode() == RescaleMode::VariancePreserved {
        let mut worst: f64 = 0.0;
        for _ in 0..draws {
            let t = uniform(&mut r);
            let (a, s) = ns.eval(t)?;
            worst = worst.max((a * a + s * s - 1.0).abs());
        }
        for k in 0..stages.num_stages() {
            let (lo, hi) = stages.span(k);
            for t in [lo, hi] {
                let (a, s) = ns.eval_in_stage(t, k);
                worst = worst.max((a * a + s * s - 1.0).abs());
            }
        }
        out.push(Check::at_most("schedule.vp_closure", worst, 1e-6, format!("{draws} random t and every stage endpoint")));
    }
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let k = (uniform(&mut r) * stages.num_stages() as f64) as usize % stages.num_stages();
        let (lo, hi) = stages.span(k);
        let mut p = [0.0; 3].map(|_| lo + (hi - lo) * uniform(&mut r));
        p.sort_by(f64::total_cmp);
        let [s, u, t] = p;
        let (a_ts, s_ts) = ns.transition_in_stage(s, t, k)?;
        let (a_tu, s_tu) = ns.transition_in_stage(u, t, k)?;
        let (a_us, s_us) = ns.transition_in_stage(s, u, k)?;
        let composed_var = a_tu * a_tu * s_us * s_us + s_tu * s_tu;
        worst = worst.max((a_ts - a_tu * a_us).abs()).max((s_ts * s_ts - composed_var).abs());
    }
    out.push(Check::at_most("schedule.chapman_kolmogorov", worst, 1e-6, format!("{draws} random s <= u <= t")));
    let sp = NoiseSchedule::with_rescale(stages.clone(), ns.rescale().to_vec(), RescaleMode::SignalPreserved)?;
    for k in 1..stages.num_stages() {
        let tau = stages.tau(k);
        let (_, left) = sp.eval_in_stage(tau, k - 1);
        let (_, right) = sp.eval_in_stage(tau, k);
        let d = dims[k - 1] as f64 / dims[k] as f64;
        let expected = 1.0 / (d * gammas[k - 1]).sqrt();
        let jump = right / left;
        out.push(Check::at_most(
            format!("schedule.sp_jump.boundary{k}"),
            (jump / expected - 1.0).abs(),
            1e-12,
            format!("jump {jump:.9}, expected 1/sqrt(d*gamma) = {expected:.9}"),
        ));
    }
    Ok(out)
}

/// Every stage boundary is a point of the sampler's time grid.
pub fn time_grid_hits_boundaries(stages: &StageSchedule, dt: f64) -> Check {
    let grid = time_grid(stages, dt);
    let mut worst: f64 = 0.0;
    for (k, g) in grid.iter().enumerate() {
        let (lo, hi) = stages.span(k);
        worst = worst.max((g[0] - hi).abs()).max((g[g.len() - 1] - lo).abs());
    }
    let steps: usize = grid.iter().map(|g| g.len() - 1).sum();
    Check::at_most("sampler.time_grid", worst, 0.0, format!("{steps} steps"))
}

/// Monte-Carlo patch SNR across each boundary: the left limit in stage
/// `k − 1` (signal `g_k(x^k)`, noise `ε`) against the right limit in stage
/// `k` (signal `x^k`, noise `ζ(ε)`). Signal powers average over `data`,
/// noise powers over `draws` noise samples.
pub fn boundary_snr(
    stack: &TransformStack,
    ns: &NoiseSchedule,
    data: &[Tensor],
    zeta: ZetaMode,
    draws: usize,
    seed: u64,
) -> anyhow::Result<Vec<Check>> {
    if data.is_empty() {
        bail!("boundary SNR needs data");
    }
    let spec = PatchSpec::from_shapes(stack.shapes())?;
    let stages = ns.stages();
    let mut out = Vec::new();
    let mut r = seeded(seed);
    for k in 1..=stack.k() {
        let tau = stages.tau(k);
        let (a_l, s_l) = ns.eval_in_stage(tau, k - 1);
        let (a_r, s_r) = ns.eval_in_stage(tau, k);
        let (p_l, p_r) = (spec.extent_at(k - 1)?, spec.extent_at(k)?);
        // across a resolution change the fine side sees the same field one
        // level up the pyramid; the interpolated mean is reported alongside
        let resampled = stack.shape(k - 1) != stack.shape(k);
        let (mut sig_l, mut sig_r, mut sig_interp) = (0.0, 0.0, 0.0);
        for x in data {
            let (interp, _) = stack.interpolated_target_in_stage(stages, x, tau, k - 1)?;
            let after = stack.forward_to_stage(x, k)?;
            let p_interp = patch_power(&interp, p_l);
            sig_interp += p_interp;
            sig_l += if resampled { patch_power(&stack.forward_to_stage(x, k - 1)?, p_l) } else { p_interp };
            sig_r += patch_power(&after, p_r);
        }
        let (mut noise_l, mut noise_r) = (0.0, 0.0);
        let fine = stack.shape(k - 1);
        for _ in 0..draws {
            let eps = standard_normal_tensor(&mut r, fine);
            let coarse = boundary_forward(&eps, stack.partition(k), zeta, stack.shape(k))?;
            noise_l += patch_power(&eps, p_l);
            noise_r += patch_power(&coarse, p_r);
        }
        let n = data.len() as f64;
        let snr_l = a_l * a_l * sig_l / n / (s_l * s_l * noise_l / draws as f64);
        let snr_r = a_r * a_r * sig_r / n / (s_r * s_r * noise_r / draws as f64);
        out.push(Check::within(
            format!("snr.boundary{k}"),
            snr_r / snr_l,
            Some(0.95),
            Some(1.05),
            format!(
                "SNR {snr_l:.6e} before, {snr_r:.6e} after, {:.6e} against the interpolated mean, {draws} noise draws, {} images",
                snr_r / snr_l * sig_l / sig_interp,
                data.len()
            ),
        ));
    }
    Ok(out)
}

/// A small stack of the configured kind for the Monte-Carlo moment checks,
/// whose cost grows with the latent size while the property does not.
pub fn probe_setup(kind: TransformKind, stages: &StageSchedule, rescale: RescaleMode, seed: u64) -> anyhow::Result<(TransformStack, NoiseSchedule, Tensor)> {
    let k = stages.k();
    let (stack, size) = match kind {
        TransformKind::Downsample | TransformKind::BlurUpsample => {
            let size = 2usize << k;
            let image = Shape::new(1, size, size);
            let stack = if kind == TransformKind::Downsample {
                TransformStack::downsample(image, k)?
            } else {
                TransformStack::blur_upsample(image, k)?
            };
            (stack, size)
        }
        TransformKind::BlurGaussian => (TransformStack::blur_gaussian(Shape::new(1, 8, 8), stages)?, 8),
        TransformKind::LinearAe => {
            let fit = blobs(64, 4, 1, seed);
            let ae = LinearAutoencoder::fit(&fit, Shape::new(1, 2, 2), 8, seed)?;
            (TransformStack::linear_ae(ae), 4)
        }
    };
    let ns = NoiseSchedule::new(stages.clone(), &stack.dims(), stack.gammas(), rescale)?;
    let x = blobs(1, size, 1, seed.wrapping_add(1)).remove(0);
    Ok((stack, ns, x))
}

/// `q_transition ∘ q_sample` against the analytic marginal `N(α_t x_t, σ_t²)`
/// at three `(s, t)` pairs per stage. The mean error is the RMS over
/// elements relative to `sqrt(mean(μ²) + σ_t²)`; the variance is pooled.
pub fn process_consistency(stack: &TransformStack, ns: &NoiseSchedule, x: &Tensor, draws: usize, seed: u64) -> anyhow::Result<Vec<Check>> {
    let stages = ns.stages();
    let mut r = seeded(seed);
    let mut out = Vec::new();
    for k in 0..stages.num_stages() {
        let (lo, hi) = stages.span(k);
        let shape = stack.shape(k);
        let n = shape.numel();
        let (mut worst_mean, mut worst_var, mut worst_ratio) = (0.0f64, 0.0f64, 1.0f64);
        let mut pairs = String::new();
        for (fs, ft) in [(0.1, 0.5), (0.3, 0.8), (0.6, 1.0)] {
            let (s, t) = (lo + fs * (hi - lo), lo + ft * (hi - lo));
            let mut sum = vec![0.0f64; n];
            let mut sq = vec![0.0f64; n];
            for _ in 0..draws {
                let e1 = standard_normal_tensor(&mut r, shape);
                let e2 = standard_normal_tensor(&mut r, shape);
                let zs = q_sample_in_stage(stack, ns, x, s, k, &e1)?;
                let zt = q_transition(stack, ns, x, &zs, t, &e2)?;
                for (i, &v) in zt.z.data().iter().enumerate() {
                    sum[i] += v as f64;
                    sq[i] += (v as f64) * (v as f64);
                }
            }
            let (xt, _) = stack.interpolated_target_in_stage(stages, x, t, k)?;
            let (a_t, s_t) = ns.eval_in_stage(t, k);
            let m = draws as f64;
            let (mut err2, mut mu2, mut var) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let mu = a_t * xt.data()[i] as f64;
                let mean = sum[i] / m;
                err2 += (mean - mu).powi(2);
                mu2 += mu * mu;
                var += (sq[i] - m * mean * mean) / (m - 1.0);
            }
            let mean_err = (err2 / n as f64).sqrt() / (mu2 / n as f64 + s_t * s_t).sqrt();
            let ratio = var / n as f64 / (s_t * s_t);
            worst_mean = worst_mean.max(mean_err);
            if (ratio - 1.0).abs() > worst_var {
                worst_var = (ratio - 1.0).abs();
                worst_ratio = ratio;
            }
            pairs.push_str(&format!("({s:.3},{t:.3})"));
        }
        out.push(Check::at_most(
            format!("process.mean.stage{k}"),
            worst_mean,
            0.01,
            format!("{draws} draws at {pairs}"),
        ));
        out.push(Check::within(
            format!("process.variance.stage{k}"),
            worst_ratio,
            Some(0.99),
            Some(1.01),
            format!("{draws} draws at {pairs}"),
        ));
    }
    Ok(out)
}

/// The `η = 1` reverse step against a numerically integrated 1-D posterior
/// `p(z_s | z_t, x)` built from the forward marginal and transition.
pub fn posterior_grid_bayes(ns: &NoiseSchedule) -> anyhow::Result<Check> {
    let stages = ns.stages();
    let mut worst: f64 = 0.0;
    let one = Shape::new(1, 1, 1);
    let scalar = |v: f64| Tensor::full(one, v as f32);
    for k in 0..stages.num_stages() {
        let (lo, hi) = stages.span(k);
        for (fs, ft, x_t, delta, e) in [(0.1, 0.5, 0.3, 0.2, 0.7), (0.4, 0.9, -0.6, -0.1, -1.2), (0.7, 1.0, 0.9, 0.05, 0.1)] {
            let (s, t) = (lo + fs * (hi - lo), lo + ft * (hi - lo));
            // use the f32-rounded values the tensors carry
            let (x_t, delta) = (x_t as f32 as f64, delta as f32 as f64);
            let x_s = x_t + delta * (t - s) / (t - lo);
            let (a_s, s_s) = ns.eval_in_stage(s, k);
            let (a_t, s_t) = ns.eval_in_stage(t, k);
            let (a_ts, s_ts) = ns.transition_in_stage(s, t, k)?;
            let z_t = (a_t * x_t + s_t * e) as f32 as f64;

            let n = 40_001;
            let (c, w) = (a_s * x_s, 12.0 * s_s);
            let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let zs = c - w + 2.0 * w * i as f64 / (n - 1) as f64;
                let prior = (zs - c) / s_s;
                let lik = (z_t - a_ts * zs - a_t * (x_t - x_s)) / s_ts;
                let p = (-0.5 * (prior * prior + lik * lik)).exp();
                z0 += p;
                z1 += p * zs;
                z2 += p * zs * zs;
            }
            let mean = z1 / z0;
            let sd = (z2 / z0 - mean * mean).max(0.0).sqrt();

            let step = reverse_posterior(ns, &scalar(x_t), &scalar(delta), s, t, k, 1.0)?;
            let eps_hat = (z_t - a_t * x_t) / s_t;
            let lib_mean = step.mean.data()[0] as f64 + step.carry * eps_hat;
            worst = worst.max((lib_mean - mean).abs()).max((step.fresh - sd).abs());
        }
    }
    Ok(Check::at_most("process.posterior_grid_bayes", worst, 1e-3, "3 (s, t) pairs per stage"))
}

/// `ζ` and its inverse at every boundary: DROP recovers the coarse noise
/// exactly, AVERAGE recovers it up to `f32` rounding, and AVERAGE lifts to
/// elementwise standard normals.
pub fn boundary_operators(stack: &TransformStack, draws: usize, seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut r = seeded(seed);
    let big_k = stack.k();
    for k in 1..=big_k {
        let (fine, coarse) = (stack.shape(k - 1), stack.shape(k));
        let part = stack.partition(k);
        let noise = |r: &mut fdm_core::Rng| {
            let mut comps = vec![Vec::new(); big_k + 1];
            comps[k] = standard_normal_vec(r, fine.numel() - coarse.numel());
            FullNoise::from_parts(Tensor::zeros(stack.shape(big_k)), comps, 0)
        };
        let (mut drop_err, mut avg_err) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let eps = standard_normal_tensor(&mut r, coarse);
            let mut full = noise(&mut r);
            let lifted = boundary_reverse(&eps, &mut full, k, part, ZetaMode::Drop, fine)?;
            let back = boundary_forward(&lifted, part, ZetaMode::Drop, coarse)?;
            drop_err = drop_err.max(back.max_abs_diff(&eps)?);
            full.rewind();
            let lifted = boundary_reverse(&eps, &mut full, k, part, ZetaMode::Average, fine)?;
            let back = boundary_forward(&lifted, part, ZetaMode::Average, coarse)?;
            for (a, b) in back.data().iter().zip(eps.data()) {
                avg_err = avg_err.max((a - b).abs() as f64 / b.abs().max(1.0) as f64);
            }
        }
        out.push(Check::at_most(format!("zeta.drop_round_trip.boundary{k}"), drop_err, 0.0, "100 noises"));
        out.push(Check::at_most(
            format!("zeta.average_round_trip.boundary{k}"),
            avg_err,
            16.0 * f32::EPSILON as f64,
            "relative to max(1, |eps|), 100 noises",
        ));
        let n = fine.numel();
        let (mut sum, mut sq) = (vec![0.0f64; n], vec![0.0f64; n]);
        for _ in 0..draws {
            let eps = standard_normal_tensor(&mut r, coarse);
            let mut full = noise(&mut r);
            let lifted = boundary_reverse(&eps, &mut full, k, part, ZetaMode::Average, fine)?;
            for (i, &v) in lifted.data().iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += (v as f64) * (v as f64);
            }
        }
        let m = draws as f64;
        let worst = (0..n)
            .map(|i| {
                let mean = sum[i] / m;
                let var = (sq[i] - m * mean * mean) / (m - 1.0);
                mean.abs().max((var - 1.0).abs())
            })
            .fold(0.0, f64::max);
        out.push(Check::at_most(
            format!("zeta.average_marginals.boundary{k}"),
            worst,
            0.05,
            format!("max over {n} elements of |mean| and |var - 1|, {draws} draws"),
        ));
    }
    Ok(out)
}

/// The standard single-space sampler, stepping `α = cos(πt/2)`,
/// `σ = sin(πt/2)` directly; returns `z` after initialization and after
/// every update.
pub fn reference_trajectory<D: Denoise + ?Sized>(den: &D, ns: &NoiseSchedule, base: &Tensor, eta: f64, dt: f64, seed: u64) -> anyhow::Result<Vec<Tensor>> {
    let steps = (1.0 / dt).round() as usize;
    let coeffs = |t: f64| ((FRAC_PI_2 * t).cos(), (FRAC_PI_2 * t).sin());
    let mut fresh = fresh_noise_rng(seed);
    let mut z = base.clone();
    let mut out = vec![z.clone()];
    for j in 0..steps - 1 {
        let t = 1.0 - j as f64 / steps as f64;
        let s = 1.0 - (j + 1) as f64 / steps as f64;
        let o = den.predict_batch(ns, &[&z], &[t], 0)?.remove(0);
        let x = match den.parameterization() {
            Parameterization::Velocity => o.x,
            Parameterization::Epsilon => x_from_eps(ns, &LatentState { z: z.clone(), t, k: 0 }, &o.eps, dt)?,
        };
        let (a_t, s_t) = coeffs(t);
        let (a_s, s_s) = coeffs(s);
        let var_ts = s_t * s_t - (a_t / a_s).powi(2) * s_s * s_s;
        let sig_bar = s_s * var_ts.max(0.0).sqrt() / s_t;
        let carry = (s_s * s_s - eta * eta * sig_bar * sig_bar).max(0.0).sqrt();
        let noise = (eta * sig_bar != 0.0).then(|| standard_normal_tensor(&mut fresh, z.shape()));
        let mut next = Tensor::zeros(z.shape());
        for i in 0..z.len() {
            let mut v = a_s * x.data()[i] as f64 + carry * o.eps.data()[i] as f64;
            if let Some(n) = &noise {
                v += eta * sig_bar * n.data()[i] as f64;
            }
            next.data_mut()[i] = v as f32;
        }
        z = next;
        out.push(z.clone());
    }
    Ok(out)
}

/// With `K = 0`, the multi-stage sampler and the standard sampler driven by
/// the same network and noise agree step by step.
pub fn k0_reduction<D: Denoise + ?Sized>(den: &D, stack: &TransformStack, ns: &NoiseSchedule, eta: f64, dt: f64, seed: u64) -> anyhow::Result<Check> {
    if stack.k() != 0 {
        bail!("the reduction check needs K = 0");
    }
    let cfg = SamplerConfig {
        eta,
        dt,
        seed,
        ..SamplerConfig::default()
    };
    let mut traj = Vec::new();
    generate_seeds(den, stack, ns, &cfg, &[seed], &mut |_, _, zs| traj.push(zs[0].clone()))?;
    let base = sample_full_noise(stack, seed).base().clone();
    let reference = reference_trajectory(den, ns, &base, eta, dt, seed)?;
    if traj.len() != reference.len() {
        bail!("{} sampler states against {} reference states", traj.len(), reference.len());
    }
    let mut worst: f64 = 0.0;
    for (a, b) in traj.iter().zip(&reference) {
        let scale = b.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
        worst = worst.max(a.max_abs_diff(b)? / scale as f64);
    }
    Ok(Check::at_most(
        format!("sampler.k0_reduction.eta{eta}"),
        worst,
        1e-5,
        format!("{} states, max |dz| / max |z_ref|", traj.len()),
    ))
}

/// Central finite differences of the training loss against the analytic
/// gradient on at least `count` parameters drawn at random.
pub fn gradient_check(
    net: &Denoiser<f64>,
    stack: &TransformStack,
    ns: &NoiseSchedule,
    batch: &[Tensor],
    count: usize,
    seed: u64,
) -> anyhow::Result<Check> {
    let mut r = seeded(seed);
    let draws = draw_loss_samples(stack, ns, batch.len(), &mut r)?;
    let (_, grads) = grad_loss(net, stack, ns, batch, &draws)?;
    let h = 1e-5;
    let (mut worst, mut checked, mut tried) = (0.0f64, 0usize, 0usize);
    let mut stages_seen = std::collections::BTreeSet::new();
    for d in &draws {
        stages_seen.insert(ns.stages().stage_of(d.t)?);
    }
    while checked < count {
        tried += 1;
        if tried > 50 * count {
            bail!("only {checked} parameters with a non-negligible gradient");
        }
        let idx = (uniform(&mut r) * net.num_params() as f64) as usize % net.num_params();
        let mut plus = net.clone();
        plus.params_mut()[idx] += h;
        let mut minus = net.clone();
        minus.params_mut()[idx] -= h;
        let fd = (training_loss(&plus, stack, ns, batch, &draws)? - training_loss(&minus, stack, ns, batch, &draws)?) / (2.0 * h);
        let g = grads[idx];
        if fd.abs().max(g.abs()) < 1e-8 {
            continue;
        }
        worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()));
        checked += 1;
    }
    Ok(Check::at_most(
        "gradients.finite_difference",
        worst,
        1e-3,
        format!("{checked} parameters of {}, stages {stages_seen:?}, h = {h}", net.num_params()),
    ))
}

/// Perturbs every parameter so no gradient path is dead (the output adapter
/// starts at zero, which blocks everything upstream).
pub fn perturb<T: Real>(net: &mut Denoiser<T>, scale: f64, seed: u64) {
    let mut r = seeded(seed);
    for p in net.params_mut() {
        *p += T::from_f64(scale * standard_normal(&mut r)).expect("finite perturbation");
    }
}

/// Moving average of `losses[end - window .. end]`.
pub fn moving_average(losses: &[f64], end: usize, window: usize) -> f64 {
    let w = &losses[end - window..end];
    w.iter().sum::<f64>() / w.len() as f64
}

/// Relative drop of the 100-step moving average from step 500 to the end.
pub fn loss_drop(losses: &[f64]) -> anyhow::Result<Check> {
    if losses.len() < 600 {
        bail!("need at least 600 steps of losses, got {}", losses.len());
    }
    let early = moving_average(losses, 500, 100);
    let late = moving_average(losses, losses.len(), 100);
    Ok(Check::at_least(
        "training.loss_drop",
        1.0 - late / early,
        0.5,
        format!("MA100 {early:.6e} at step 500, {late:.6e} at step {}", losses.len()),
    ))
}

/// Per-channel mean (relative to the channel's std) and covariance
/// (relative Frobenius) of samples against the corpus.
pub fn moment_match(samples: &[Tensor], corpus: &[Tensor]) -> Vec<Check> {
    let (ms, mc) = (Moments::of(samples), Moments::of(corpus));
    let (mean_err, cov_err) = ms.relative_errors(&mc);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
    vec![
        Check::at_most(
            "samples.channel_mean",
            mean_err,
            0.1,
            format!("{} samples, means [{}] vs corpus [{}]", samples.len(), fmt(&ms.mean), fmt(&mc.mean)),
        ),
        Check::at_most(
            "samples.channel_covariance",
            cov_err,
            0.1,
            format!("{} samples, relative Frobenius error", samples.len()),
        ),
    ]
}

fn bits(ts: &[Tensor]) -> Vec<u32> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

/// Two runs with the same seed produce the same bits.
pub fn determinism<D: Denoise + ?Sized>(den: &D, stack: &TransformStack, ns: &NoiseSchedule, cfg: &SamplerConfig, n: usize) -> anyhow::Result<Check> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| cfg.seed + i).collect();
    let a = generate_seeds(den, stack, ns, cfg, &seeds, &mut |_, _, _| {})?;
    let b = generate_seeds(den, stack, ns, cfg, &seeds, &mut |_, _, _| {})?;
    let differing = bits(&a).iter().zip(bits(&b).iter()).filter(|(x, y)| x != y).count();
    Ok(Check::at_most(
        format!("sampler.determinism.eta{}", cfg.eta),
        differing as f64,
        0.0,
        format!("differing f32 values over {n} samples"),
    ))
}

/// Replacing only the fine complements of `ε_full` leaves the stage-`K`
/// trajectory unchanged up to the first boundary.
pub fn trajectory_prefix<D: Denoise + ?Sized>(den: &D, stack: &TransformStack, ns: &NoiseSchedule, cfg: &SamplerConfig) -> anyhow::Result<Check> {
    let big_k = stack.k();
    if big_k == 0 {
        bail!("the prefix property needs K >= 1");
    }
    let full = sample_full_noise(stack, cfg.seed);
    let mut other = full.clone();
    let mut r = seeded(cfg.seed ^ 0x5eed);
    for k in 1..=big_k {
        let n = full.complement(k).len();
        other.replace_complement(k, standard_normal_vec(&mut r, n))?;
    }
    let record = |full: FullNoise| -> anyhow::Result<(Vec<Tensor>, Vec<Tensor>)> {
        let (mut coarse, mut rest) = (Vec::new(), Vec::new());
        let out = generate_with_noise(den, stack, ns, cfg, vec![full], &mut |k, _, zs| {
            if k == big_k {
                coarse.push(zs[0].clone());
            } else {
                rest.push(zs[0].clone());
            }
        })?;
        rest.extend(out);
        Ok((coarse, rest))
    };
    let (ca, ra) = record(full)?;
    let (cb, rb) = record(other)?;
    let differing = bits(&ca).iter().zip(bits(&cb).iter()).filter(|(x, y)| x != y).count();
    let diverged = bits(&ra) != bits(&rb);
    let passed_detail = format!("{} stage-{big_k} states compared; later states differ: {diverged}", ca.len());
    let mut c = Check::at_most("sampler.trajectory_prefix", differing as f64, 0.0, passed_detail);
    if ca.len() != cb.len() || ca.is_empty() || !diverged {
        c.passed = false;
    }
    Ok(c)
}

/// Outcome of conditional generation over a set of images.
#[derive(Clone, Debug)]
pub struct ConditionalReport {
    pub conditional_mse: f64,
    pub baseline_mse: f64,
    pub checks: Vec<Check>,
}

/// Conditions `x_c = f(x)` at stage `cond.stage`; the generated outputs,
/// degraded again, are compared with `x_c`, as are unconditional samples
/// with the same seeds. Also checks that every gradient initialization
/// has a non-increasing objective.
pub fn conditional_faithfulness<D: Denoise + ?Sized>(
    den: &D,
    stack: &TransformStack,
    ns: &NoiseSchedule,
    cfg: &SamplerConfig,
    cond: CondSpec,
    images: &[Tensor],
    label: &str,
) -> anyhow::Result<ConditionalReport> {
    let kc = cond.stage;
    let conditions: Vec<Tensor> = images
        .iter()
        .map(|x| stack.forward_to_stage(x, kc))
        .collect::<Result<_, _>>()?;
    let ccfg = SamplerConfig { cond: Some(cond), ..*cfg };
    let outs = conditional_generate(den, stack, ns, &ccfg, &conditions).context("conditional generation")?;
    let seeds: Vec<u64> = (0..images.len() as u64).map(|i| cfg.seed + i).collect();
    let base = generate_seeds(den, stack, ns, cfg, &seeds, &mut |_, _, _| {})?;
    let mse = |outs: &[Tensor]| -> anyhow::Result<f64> {
        let mut total = 0.0;
        for (o, c) in outs.iter().zip(&conditions) {
            total += stack.forward_to_stage(o, kc)?.mse(c)?;
        }
        Ok(total / outs.len() as f64)
    };
    let (conditional_mse, baseline_mse) = (mse(&outs)?, mse(&base)?);
    let mut increase: f64 = 0.0;
    let mut steps = 0;
    for (i, c) in conditions.iter().enumerate() {
        let init = conditional_init(den, stack, ns, c, &cond, &mut seeded(cfg.seed + i as u64))?;
        steps += init.objective.len() - 1;
        for w in init.objective.windows(2) {
            increase = increase.max(w[1] - w[0]);
        }
    }
    let checks = vec![
        Check::at_least(
            format!("conditional.{label}.mse_ratio"),
            baseline_mse / conditional_mse,
            5.0,
            format!(
                "{} trials at stage {kc}: conditional MSE {conditional_mse:.6e}, unconditional {baseline_mse:.6e}",
                images.len()
            ),
        ),
        Check::at_most(
            format!("conditional.{label}.objective_increase"),
            increase,
            0.0,
            format!("largest step-to-step increase over {steps} accepted steps"),
        ),
    ];
    Ok(ConditionalReport {
        conditional_mse,
        baseline_mse,
        checks,
    })
}
