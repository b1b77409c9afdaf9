//! Forward marginal and transition of the multi-stage process, the reverse
//! posterior step, and the noise operators used at stage boundaries.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::invalid;
use crate::schedules::NoiseSchedule;
use crate::transforms::{NoisePartition, TransformStack};
use crate::{rng, Error, Result, Shape, Tensor};

/// A latent `z` at time `t`, living in stage `k`'s space. `t` may equal the
/// closing boundary `τ_{k+1}` (the state right after crossing into stage `k`
/// during generation).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: f64,
    pub k: usize,
}

/// `z_t = α_t x_t + σ_t ε` with `k = stage_of(t)`.
pub fn q_sample(
    stack: &TransformStack,
    ns: &NoiseSchedule,
    x: &Tensor,
    t: f64,
    eps: &Tensor,
) -> Result<LatentState> {
    let k = ns.stages().stage_of(t)?;
    q_sample_in_stage(stack, ns, x, t, k, eps)
}

/// [`q_sample`] with an explicit stage, allowing `t = τ_{k+1}`.
pub fn q_sample_in_stage(
    stack: &TransformStack,
    ns: &NoiseSchedule,
    x: &Tensor,
    t: f64,
    k: usize,
    eps: &Tensor,
) -> Result<LatentState> {
    eps.ensure_shape(stack.shape(k))?;
    let (xt, _) = stack.interpolated_target_in_stage(ns.stages(), x, t, k)?;
    let (a, s) = ns.eval_in_stage(t, k);
    Ok(LatentState {
        z: xt.lincomb(a, eps, s)?,
        t,
        k,
    })
}

/// Within-stage forward transition `z_s → z_t`:
/// `z_t = α_{t|s} z_s + α_t (x_t − x_s) + σ_{t|s} ε`, where
/// `x_t − x_s = −δ_t (t − s) / (t − τ_k)`.
pub fn q_transition(
    stack: &TransformStack,
    ns: &NoiseSchedule,
    x: &Tensor,
    zs: &LatentState,
    t: f64,
    eps: &Tensor,
) -> Result<LatentState> {
    let k = zs.k;
    let stages = ns.stages();
    if stages.stage_of(t)? != k && !stages.in_closure(t, k) {
        return Err(Error::CrossStage { s: zs.t, t });
    }
    zs.z.ensure_shape(stack.shape(k))?;
    eps.ensure_shape(stack.shape(k))?;
    let s = zs.t;
    if s == t {
        return Ok(zs.clone());
    }
    let (a_ts, s_ts) = ns.transition_in_stage(s, t, k)?;
    let (a_t, _) = ns.eval_in_stage(t, k);
    let (_, delta) = stack.interpolated_target_in_stage(stages, x, t, k)?;
    let frac = (t - s) / (t - stages.tau(k));
    let mut z = zs.z.lincomb(a_ts, eps, s_ts)?;
    z.axpy((-a_t * frac) as f32, &delta)?;
    Ok(LatentState { z, t, k })
}

/// One reverse step `z_t → z_s` inside stage `k`:
/// `z_s = mean + carry · ε̂_t + fresh · ε` with `ε ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseStep {
    pub mean: Tensor,
    pub carry: f64,
    pub fresh: f64,
}

impl ReverseStep {
    pub fn sample(&self, eps_hat: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
        let mut z = self.mean.lincomb(1.0, eps_hat, self.carry)?;
        if self.fresh != 0.0 {
            let noise = noise.ok_or_else(|| invalid("stochastic step needs fresh noise"))?;
            z.axpy(self.fresh as f32, noise)?;
        }
        Ok(z)
    }
}

/// Posterior step from predictions `(x̂_t, δ̂_t, ε̂_t)`: mean
/// `α_s (x̂_t + δ̂_t (t − s)/(t − τ_k))`, `σ̄ = σ_s σ_{t|s} / σ_t`, carry
/// `sqrt(σ_s² − η² σ̄²)`, fresh `η σ̄`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_posterior(
    ns: &NoiseSchedule,
    x_hat: &Tensor,
    delta_hat: &Tensor,
    s: f64,
    t: f64,
    k: usize,
    eta: f64,
) -> Result<ReverseStep> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(invalid("eta must lie in [0, 1]"));
    }
    delta_hat.ensure_shape(x_hat.shape())?;
    let (a_s, sig_s) = ns.eval_in_stage(s, k);
    let (_, sig_t) = ns.eval_in_stage(t, k);
    if sig_t == 0.0 {
        return Err(invalid("reverse step from t = 0"));
    }
    let (_, sig_ts) = ns.transition_in_stage(s, t, k)?;
    let sig_bar = sig_s * sig_ts / sig_t;
    let var = sig_s * sig_s - eta * eta * sig_bar * sig_bar;
    debug_assert!(var >= -1e-12, "η²σ̄² exceeds σ_s²");
    let tau = ns.stages().tau(k);
    let frac = if t == s { 0.0 } else { (t - s) / (t - tau) };
    let mean = x_hat.lincomb(a_s, delta_hat, a_s * frac)?;
    Ok(ReverseStep {
        mean,
        carry: Float::sqrt(var.max(0.0)),
        fresh: eta * sig_bar,
    })
}

/// How boundary noise is carried into the coarser space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ZetaMode {
    /// Keep one designated element per group.
    Drop,
    /// Group mean rescaled by `sqrt(d)` to unit variance.
    Average,
}

/// Group size and the element indices of every group, kept element first.
fn group_indices(
    partition: NoisePartition,
    fine: Shape,
    coarse: Shape,
) -> Result<(usize, Vec<usize>)> {
    match partition {
        NoisePartition::Identity => {
            if fine != coarse {
                return Err(Error::ShapeMismatch {
                    expected: fine,
                    got: coarse,
                });
            }
            Ok((1, (0..fine.numel()).collect()))
        }
        NoisePartition::Blocks2x2 => {
            let expected = Shape::new(fine.channels, fine.height / 2, fine.width / 2);
            if !fine.height.is_multiple_of(2) || !fine.width.is_multiple_of(2) || coarse != expected {
                return Err(Error::ShapeMismatch {
                    expected,
                    got: coarse,
                });
            }
            let mut idx = Vec::with_capacity(fine.numel());
            for c in 0..coarse.channels {
                for y in 0..coarse.height {
                    for x in 0..coarse.width {
                        let base = c * fine.plane() + 2 * y * fine.width + 2 * x;
                        idx.extend([base, base + 1, base + fine.width, base + fine.width + 1]);
                    }
                }
            }
            Ok((4, idx))
        }
        NoisePartition::FlatGroups(d) => {
            if d == 0 || fine.numel() != d * coarse.numel() {
                return Err(invalid("flat grouping needs M_{k-1} = d · M_k"));
            }
            Ok((d, (0..fine.numel()).collect()))
        }
    }
}

/// `ζ(ε)`: carries stage-`(k−1)` noise into a stage-`k` tensor of `coarse` shape.
pub fn boundary_forward(
    eps: &Tensor,
    partition: NoisePartition,
    mode: ZetaMode,
    coarse: Shape,
) -> Result<Tensor> {
    let (d, idx) = group_indices(partition, eps.shape(), coarse)?;
    let src = eps.data();
    let scale = Float::sqrt(d as f64) / d as f64;
    let out: Vec<f32> = idx
        .chunks_exact(d)
        .map(|g| match mode {
            ZetaMode::Drop => src[g[0]],
            ZetaMode::Average => (g.iter().map(|&i| src[i] as f64).sum::<f64>() * scale) as f32,
        })
        .collect();
    Tensor::from_vec(coarse, out)
}

/// A full-size noise: a stage-`K` base plus, for every boundary `k`, a
/// complement holding the `M_{k−1} − M_k` entries introduced when refining
/// stage `k` to stage `k − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullNoise {
    base: Tensor,
    /// Index `k` holds boundary `k`'s complement; index 0 is unused.
    complements: Vec<Vec<f32>>,
    consumed: Vec<bool>,
    seed: u64,
}

impl FullNoise {
    pub fn from_parts(base: Tensor, complements: Vec<Vec<f32>>, seed: u64) -> Self {
        let n = complements.len();
        Self {
            base,
            complements,
            consumed: vec![false; n],
            seed,
        }
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn complement(&self, k: usize) -> &[f32] {
        &self.complements[k]
    }

    /// Total number of entries over base and complements.
    pub fn len(&self) -> usize {
        self.base.len() + self.complements.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn replace_base(&mut self, base: Tensor) -> Result<()> {
        base.ensure_shape(self.base.shape())?;
        self.base = base;
        Ok(())
    }

    pub fn replace_complement(&mut self, k: usize, data: Vec<f32>) -> Result<()> {
        let slot = self
            .complements
            .get_mut(k)
            .ok_or_else(|| invalid("no such boundary"))?;
        if slot.len() != data.len() {
            return Err(Error::LengthMismatch {
                expected: slot.len(),
                got: data.len(),
            });
        }
        *slot = data;
        Ok(())
    }

    /// Hands out boundary `k`'s complement once per trajectory.
    pub fn take_complement(&mut self, k: usize) -> Result<&[f32]> {
        if k == 0 || k >= self.complements.len() {
            return Err(invalid("no such boundary"));
        }
        if self.consumed[k] {
            return Err(Error::NoiseConsumed { boundary: k });
        }
        self.consumed[k] = true;
        Ok(&self.complements[k])
    }

    /// Marks every complement unused again (a new trajectory with the same noise).
    pub fn rewind(&mut self) {
        self.consumed.iter_mut().for_each(|c| *c = false);
    }
}

/// Draws the base first, then complements from boundary `K` down to 1.
pub fn sample_full_noise(stack: &TransformStack, seed: u64) -> FullNoise {
    let mut r = rng::seeded(seed);
    let k = stack.k();
    let base = rng::standard_normal_tensor(&mut r, stack.shape(k));
    let mut complements = vec![Vec::new(); k + 1];
    for b in (1..=k).rev() {
        let n = stack.shape(b - 1).numel() - stack.shape(b).numel();
        complements[b] = rng::standard_normal_vec(&mut r, n);
    }
    FullNoise::from_parts(base, complements, seed)
}

/// Inverse of `ζ` at boundary `k`: lifts stage-`k` noise to stage `k − 1`
/// using boundary `k`'s complement of `full` as the extra randomness.
pub fn boundary_reverse(
    eps_coarse: &Tensor,
    full: &mut FullNoise,
    k: usize,
    partition: NoisePartition,
    mode: ZetaMode,
    fine: Shape,
) -> Result<Tensor> {
    let (d, idx) = group_indices(partition, fine, eps_coarse.shape())?;
    let fresh = full.take_complement(k)?;
    if fresh.len() != (d - 1) * eps_coarse.len() {
        return Err(Error::LengthMismatch {
            expected: (d - 1) * eps_coarse.len(),
            got: fresh.len(),
        });
    }
    let mut out = vec![0.0f32; fine.numel()];
    let coarse = eps_coarse.data();
    for (gi, g) in idx.chunks_exact(d).enumerate() {
        let extra = &fresh[gi * (d - 1)..(gi + 1) * (d - 1)];
        match mode {
            ZetaMode::Drop => {
                out[g[0]] = coarse[gi];
                for (&i, &v) in g[1..].iter().zip(extra) {
                    out[i] = v;
                }
            }
            ZetaMode::Average => {
                // Sample d unit normals whose sum is sqrt(d)·ε one at a time,
                // each conditioned on the sum still to be distributed.
                let mut remaining = Float::sqrt(d as f64) * coarse[gi] as f64;
                for (j, &i) in g.iter().enumerate() {
                    let left = (d - j) as f64;
                    let v = if j + 1 == d {
                        remaining
                    } else {
                        remaining / left + Float::sqrt((left - 1.0) / left) * extra[j] as f64
                    };
                    out[i] = v as f32;
                    remaining -= v;
                }
            }
        }
    }
    Tensor::from_vec(fine, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{RescaleMode, StageKind, StageSchedule};

    fn ds_setup(mode: RescaleMode) -> (TransformStack, NoiseSchedule) {
        let stack = TransformStack::downsample(Shape::new(1, 4, 4), 2).unwrap();
        let ns = NoiseSchedule::new(
            StageSchedule::new(2, StageKind::Linear),
            &stack.dims(),
            stack.gammas(),
            mode,
        )
        .unwrap();
        (stack, ns)
    }

    fn ramp(shape: Shape) -> Tensor {
        Tensor::from_vec(
            shape,
            (0..shape.numel()).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn q_sample_endpoints() {
        let (stack, ns) = ds_setup(RescaleMode::SignalPreserved);
        let x = ramp(stack.shape(0));
        let mut r = rng::seeded(0);
        let eps = rng::standard_normal_tensor(&mut r, stack.shape(0));
        assert_eq!(q_sample(&stack, &ns, &x, 0.0, &eps).unwrap().z, x);

        let tau = ns.stages().tau(1);
        let zero = Tensor::zeros(stack.shape(1));
        let z = q_sample(&stack, &ns, &x, tau, &zero).unwrap();
        let (a, _) = ns.eval(tau).unwrap();
        let x1 = stack.forward_to_stage(&x, 1).unwrap();
        assert!(z.z.max_abs_diff(&x1.scale(a as f32)).unwrap() < 1e-6);
        assert_eq!(z.k, 1);

        assert!(q_sample(&stack, &ns, &x, 0.5, &eps).is_err());
    }

    #[test]
    fn q_transition_identity_and_last_stage() {
        let (stack, ns) = ds_setup(RescaleMode::VariancePreserved);
        let x = ramp(stack.shape(0));
        let mut r = rng::seeded(1);
        let e1 = rng::standard_normal_tensor(&mut r, stack.shape(2));
        let e2 = rng::standard_normal_tensor(&mut r, stack.shape(2));
        let zs = q_sample(&stack, &ns, &x, 0.8, &e1).unwrap();
        assert_eq!(q_transition(&stack, &ns, &x, &zs, 0.8, &e2).unwrap(), zs);

        // in the last stage the transition is the standard one
        let zt = q_transition(&stack, &ns, &x, &zs, 0.9, &e2).unwrap();
        let (a, s) = ns.transition_coeffs(0.8, 0.9).unwrap();
        let expect = zs.z.lincomb(a, &e2, s).unwrap();
        assert!(zt.z.max_abs_diff(&expect).unwrap() < 1e-6);

        let z0 = q_sample(&stack, &ns, &x, 0.1, &rng::standard_normal_tensor(&mut r, stack.shape(0))).unwrap();
        assert!(matches!(
            q_transition(&stack, &ns, &x, &z0, 0.5, &e2),
            Err(Error::CrossStage { .. })
        ));
    }

    #[test]
    fn reverse_step_degenerate_and_ddim() {
        let (_, ns) = ds_setup(RescaleMode::SignalPreserved);
        let shape = Shape::new(1, 2, 2);
        let x = ramp(shape);
        let d = ramp(shape).scale(0.1);
        let step = reverse_posterior(&ns, &x, &d, 0.5, 0.5, 1, 1.0).unwrap();
        let (a, s) = ns.eval(0.5).unwrap();
        assert!(step.mean.max_abs_diff(&x.scale(a as f32)).unwrap() < 1e-7);
        assert!((step.carry - s).abs() < 1e-12);
        assert_eq!(step.fresh, 0.0);

        let step = reverse_posterior(&ns, &x, &d, 0.4, 0.5, 1, 0.0).unwrap();
        assert_eq!(step.fresh, 0.0);
        assert!(reverse_posterior(&ns, &x, &d, 0.0, 0.0, 0, 1.0).is_err());
        assert!(reverse_posterior(&ns, &x, &d, 0.4, 0.5, 1, 1.5).is_err());
    }

    /// Bayes oracle: q(z_s | z_t, x) ∝ q(z_t | z_s, x) q(z_s | x) on a grid.
    #[test]
    fn reverse_posterior_matches_grid_bayes() {
        let (_, ns) = ds_setup(RescaleMode::VariancePreserved);
        let k = 1;
        let (lo, _) = ns.stages().span(k);
        let (xk, approx) = (0.8f64, -0.3f64);
        let (s, t) = (0.45, 0.6);
        let interp = |u: f64| {
            let w = (u - lo) / (ns.stages().tau(2) - lo);
            (1.0 - w) * xk + w * approx
        };
        let (x_s, x_t) = (interp(s), interp(t));
        let (a_s, sig_s) = ns.eval(s).unwrap();
        let (a_t, sig_t) = ns.eval(t).unwrap();
        let (a_ts, sig_ts) = ns.transition_coeffs(s, t).unwrap();
        for &z_t in &[-1.3, 0.2, 0.9] {
            let n = 200_001;
            let (lo_g, hi_g) = (-6.0, 6.0);
            let h = (hi_g - lo_g) / (n - 1) as f64;
            let (mut w_sum, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let zs = lo_g + i as f64 * h;
                let lik = z_t - a_ts * zs - a_t * (x_t - x_s);
                let prior = zs - a_s * x_s;
                let logp = -0.5 * lik * lik / (sig_ts * sig_ts) - 0.5 * prior * prior / (sig_s * sig_s);
                let w = logp.exp();
                w_sum += w;
                m1 += w * zs;
                m2 += w * zs * zs;
            }
            let mean = m1 / w_sum;
            let var = m2 / w_sum - mean * mean;

            let one = Shape::new(1, 1, 1);
            let xt = Tensor::full(one, x_t as f32);
            let dt = Tensor::full(one, (xk - x_t) as f32);
            let eps_t = Tensor::full(one, ((z_t - a_t * x_t) / sig_t) as f32);
            let step = reverse_posterior(&ns, &xt, &dt, s, t, k, 1.0).unwrap();
            let got_mean = step.mean.data()[0] as f64 + step.carry * eps_t.data()[0] as f64;
            assert!((got_mean - mean).abs() < 1e-3, "{got_mean} vs {mean}");
            assert!((step.fresh * step.fresh - var).abs() < 1e-3);
        }
    }

    #[test]
    fn drop_keeps_top_left_and_round_trips() {
        let fine = Shape::new(2, 4, 4);
        let coarse = Shape::new(2, 2, 2);
        let eps = ramp(fine);
        let z = boundary_forward(&eps, NoisePartition::Blocks2x2, ZetaMode::Drop, coarse).unwrap();
        assert_eq!(z.at(1, 1, 0), eps.at(1, 2, 0));
        assert_eq!(z.at(0, 0, 1), eps.at(0, 0, 2));

        let stack = TransformStack::downsample(fine, 1).unwrap();
        let mut full = sample_full_noise(&stack, 5);
        let up = boundary_reverse(&z, &mut full, 1, NoisePartition::Blocks2x2, ZetaMode::Drop, fine)
            .unwrap();
        assert_eq!(
            boundary_forward(&up, NoisePartition::Blocks2x2, ZetaMode::Drop, coarse).unwrap(),
            z
        );
        // complements are single use
        assert_eq!(
            boundary_reverse(&z, &mut full, 1, NoisePartition::Blocks2x2, ZetaMode::Drop, fine),
            Err(Error::NoiseConsumed { boundary: 1 })
        );
        full.rewind();
        assert!(full.take_complement(1).is_ok());
    }

    #[test]
    fn average_inverse_block_sums() {
        let fine = Shape::new(1, 4, 4);
        let coarse = Shape::new(1, 2, 2);
        let stack = TransformStack::downsample(fine, 1).unwrap();
        let mut full = sample_full_noise(&stack, 9);
        let eps = ramp(coarse);
        let up = boundary_reverse(&eps, &mut full, 1, NoisePartition::Blocks2x2, ZetaMode::Average, fine)
            .unwrap();
        let back = boundary_forward(&up, NoisePartition::Blocks2x2, ZetaMode::Average, coarse).unwrap();
        assert!(back.max_abs_diff(&eps).unwrap() < 1e-6);
    }

    #[test]
    fn flat_groups_for_latents() {
        let fine = Shape::new(3, 4, 4);
        let coarse = Shape::new(1, 2, 2);
        let eps = ramp(fine);
        let z = boundary_forward(&eps, NoisePartition::FlatGroups(12), ZetaMode::Drop, coarse).unwrap();
        assert_eq!(z.data(), &[eps.data()[0], eps.data()[12], eps.data()[24], eps.data()[36]]);
        assert!(boundary_forward(&eps, NoisePartition::FlatGroups(5), ZetaMode::Drop, coarse).is_err());
    }

    #[test]
    fn full_noise_sizes() {
        let stack = TransformStack::downsample(Shape::new(3, 32, 32), 2).unwrap();
        let full = sample_full_noise(&stack, 3);
        assert_eq!(full.base().len(), 192);
        assert_eq!(full.complement(2).len(), 576);
        assert_eq!(full.complement(1).len(), 2304);
        assert_eq!(full.len(), 3072);
        assert_eq!(sample_full_noise(&stack, 3), full);
        assert_ne!(sample_full_noise(&stack, 4), full);

        let single = TransformStack::downsample(Shape::new(3, 32, 32), 0).unwrap();
        let full = sample_full_noise(&single, 3);
        assert_eq!(full.base().len(), 3072);
        assert_eq!(full.len(), 3072);
    }
}
