//! Stage boundaries, the rescaled signal/noise schedule and the
//! resolution-agnostic signal-to-noise ratio.
//!
//! Diffusion time `t ∈ [0, 1]` is split into `K + 1` half-open stages
//! `[τ_k, τ_{k+1})`, with `t = 1` closing the last one. Inside stage `k` the
//! base cosine schedule `(cos ½πt, sin ½πt)` has its noise scaled by the
//! accumulated factor `r_k`, and optionally renormalised to unit norm.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use num_traits::Float;

use crate::error::invalid;
use crate::{Error, Result, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageKind {
    /// `τ_k = k / (K + 1)`.
    Linear,
    /// `τ_k = cos(½π (1 − k / (K + 1)))`: short early stages, long late ones.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    kind: StageKind,
    tau: Vec<f64>,
}

impl StageSchedule {
    pub fn new(k: usize, kind: StageKind) -> Self {
        let n = (k + 1) as f64;
        let mut tau: Vec<f64> = (0..=k + 1)
            .map(|i| {
                let u = i as f64 / n;
                match kind {
                    StageKind::Linear => u,
                    StageKind::Cosine => Float::cos(FRAC_PI_2 * (1.0 - u)),
                }
            })
            .collect();
        // cos(π/2) is not exactly zero in floating point.
        tau[0] = 0.0;
        tau[k + 1] = 1.0;
        Self { kind, tau }
    }

    /// Builds a schedule from explicit boundaries.
    pub fn from_boundaries(kind: StageKind, tau: Vec<f64>) -> Result<Self> {
        if tau.len() < 2 || tau[0] != 0.0 || *tau.last().unwrap() != 1.0 {
            return Err(invalid("stage boundaries must start at 0 and end at 1"));
        }
        if tau.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("stage boundaries must be strictly increasing"));
        }
        Ok(Self { kind, tau })
    }

    pub fn kind(&self) -> StageKind {
        self.kind
    }

    /// Number of stage boundaries `K` (stages are `0..=K`).
    pub fn k(&self) -> usize {
        self.tau.len() - 2
    }

    pub fn num_stages(&self) -> usize {
        self.tau.len() - 1
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.tau
    }

    pub fn tau(&self, k: usize) -> f64 {
        self.tau[k]
    }

    /// Stage `k` spans `[start, end)`.
    pub fn span(&self, k: usize) -> (f64, f64) {
        (self.tau[k], self.tau[k + 1])
    }

    /// The unique `k` with `τ_k ≤ t < τ_{k+1}`; `t = 1` belongs to stage `K`.
    pub fn stage_of(&self, t: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let k = self.tau.partition_point(|&b| b <= t);
        Ok((k - 1).min(self.k()))
    }

    /// Whether `t` lies in the closure `[τ_k, τ_{k+1}]` of stage `k`.
    pub fn in_closure(&self, t: f64, k: usize) -> bool {
        k <= self.k() && self.tau[k] <= t && t <= self.tau[k + 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RescaleMode {
    /// The plain cosine schedule in every stage.
    None,
    /// Signal preserved: only the noise is divided at each boundary.
    SignalPreserved,
    /// Variance preserved: signal-preserved, then renormalised so α² + σ² = 1.
    VariancePreserved,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    stages: StageSchedule,
    rescale: Vec<f64>,
    mode: RescaleMode,
}

impl NoiseSchedule {
    /// Accumulates `r_k = r_{k-1} / sqrt(d_k γ_k)` over the stage dimensions
    /// `dims = [M_0, .., M_K]` and signal-power ratios `gammas = [γ_1, .., γ_K]`.
    pub fn new(
        stages: StageSchedule,
        dims: &[usize],
        gammas: &[f64],
        mode: RescaleMode,
    ) -> Result<Self> {
        let k = stages.k();
        if dims.len() != k + 1 {
            return Err(invalid("need one dimension per stage"));
        }
        if gammas.len() != k {
            return Err(invalid("need one signal-power ratio per boundary"));
        }
        if dims.contains(&0) {
            return Err(invalid("stage dimensions must be positive"));
        }
        if dims.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("stage dimensions must be non-increasing"));
        }
        if gammas.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(invalid("signal-power ratios must be positive"));
        }
        let mut rescale = vec![1.0; k + 1];
        for i in 1..=k {
            let d = dims[i - 1] as f64 / dims[i] as f64;
            rescale[i] = rescale[i - 1] / Float::sqrt(d * gammas[i - 1]);
        }
        Ok(Self {
            stages,
            rescale,
            mode,
        })
    }

    /// A schedule with explicitly supplied rescale factors; used for fault
    /// injection and for testing the SNR check against wrong factors.
    pub fn with_rescale(stages: StageSchedule, rescale: Vec<f64>, mode: RescaleMode) -> Result<Self> {
        if rescale.len() != stages.num_stages() {
            return Err(invalid("need one rescale factor per stage"));
        }
        if rescale.iter().any(|&r| !(r > 0.0)) {
            return Err(invalid("rescale factors must be positive"));
        }
        Ok(Self {
            stages,
            rescale,
            mode,
        })
    }

    pub fn stages(&self) -> &StageSchedule {
        &self.stages
    }

    pub fn rescale(&self) -> &[f64] {
        &self.rescale
    }

    pub fn mode(&self) -> RescaleMode {
        self.mode
    }

    /// `(α_t, σ_t)` using the rescale factor of `stage_of(t)`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        let k = self.stages.stage_of(t)?;
        Ok(self.eval_in_stage(t, k))
    }

    /// `(α_t, σ_t)` evaluated with stage `k`'s factor. At `t = τ_{k+1}` this
    /// is the left limit of the schedule, i.e. the value seen by a latent that
    /// still lives in stage `k`'s space.
    pub fn eval_in_stage(&self, t: f64, k: usize) -> (f64, f64) {
        let a = Float::cos(FRAC_PI_2 * t);
        let b = Float::sin(FRAC_PI_2 * t);
        let r = self.rescale[k];
        match self.mode {
            RescaleMode::None => (a, b),
            RescaleMode::SignalPreserved => (a, r * b),
            RescaleMode::VariancePreserved => {
                let n = Float::hypot(a, r * b);
                (a / n, r * b / n)
            }
        }
    }

    /// `(α_{t|s}, σ_{t|s})` for `s ≤ t` in one stage.
    pub fn transition_coeffs(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        let ks = self.stages.stage_of(s)?;
        let kt = self.stages.stage_of(t)?;
        if ks != kt {
            return Err(Error::CrossStage { s, t });
        }
        self.transition_in_stage(s, t, ks)
    }

    /// Same as [`transition_coeffs`](Self::transition_coeffs) but with the
    /// stage given, so `t` may sit on the closing boundary `τ_{k+1}`.
    pub fn transition_in_stage(&self, s: f64, t: f64, k: usize) -> Result<(f64, f64)> {
        if k > self.stages.k() {
            return Err(Error::StageOutOfRange {
                stage: k,
                stages: self.stages.num_stages(),
            });
        }
        if !(self.stages.in_closure(s, k) && self.stages.in_closure(t, k)) {
            return Err(Error::CrossStage { s, t });
        }
        if s > t {
            return Err(invalid("transition needs s <= t"));
        }
        let (a_s, s_s) = self.eval_in_stage(s, k);
        let (a_t, s_t) = self.eval_in_stage(t, k);
        let a_ts = a_t / a_s;
        let var = (s_t * s_t - a_ts * a_ts * s_s * s_s).max(0.0);
        Ok((a_ts, Float::sqrt(var)))
    }

    /// `α_t² / σ_t²` in stage `k`.
    pub fn snr_in_stage(&self, t: f64, k: usize) -> f64 {
        let (a, s) = self.eval_in_stage(t, k);
        (a * a) / (s * s)
    }
}

/// The averaging patch of the resolution-agnostic SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec {
    /// Patch height and width at the stage-0 resolution.
    pub extent: (usize, usize),
    /// The data range: the stage-0 grid the patch tiles.
    pub domain: (usize, usize),
    /// Per-stage `(vertical, horizontal)` downsampling factor relative to stage 0.
    pub stage_scale: Vec<(usize, usize)>,
}

impl PatchSpec {
    /// Derives the stage scales from the per-stage shapes. The default patch
    /// is the footprint of one coarsest-stage element.
    pub fn from_shapes(shapes: &[Shape]) -> Result<Self> {
        let first = shapes.first().ok_or_else(|| invalid("no stage shapes"))?;
        let mut stage_scale = Vec::with_capacity(shapes.len());
        for s in shapes {
            if first.height % s.height != 0 || first.width % s.width != 0 {
                return Err(invalid("stage grids must divide the stage-0 grid"));
            }
            stage_scale.push((first.height / s.height, first.width / s.width));
        }
        let extent = *stage_scale.last().unwrap();
        Ok(Self {
            extent,
            domain: (first.height, first.width),
            stage_scale,
        })
    }

    pub fn with_extent(mut self, extent: (usize, usize)) -> Self {
        self.extent = extent;
        self
    }

    /// The patch extent in stage-`k` elements.
    pub fn extent_at(&self, k: usize) -> Result<(usize, usize)> {
        let &(sy, sx) = self.stage_scale.get(k).ok_or(Error::StageOutOfRange {
            stage: k,
            stages: self.stage_scale.len(),
        })?;
        let (ey, ex) = self.extent;
        if ey < sy || ex < sx || ey % sy != 0 || ex % sx != 0 {
            return Err(Error::ResolutionLimit {
                stage: k,
                extent: ey.min(ex),
            });
        }
        let (py, px) = (ey / sy, ex / sx);
        let (gh, gw) = (self.domain.0 / sy, self.domain.1 / sx);
        if gh % py != 0 || gw % px != 0 {
            return Err(invalid("patch does not tile the stage grid"));
        }
        Ok((py, px))
    }
}

/// Per-patch squared norm of the patch mean, averaged over patches.
pub fn patch_power(x: &Tensor, patch: (usize, usize)) -> f64 {
    let s = x.shape();
    let (py, px) = patch;
    let (ny, nx) = (s.height / py, s.width / px);
    let inv = 1.0 / (py * px) as f64;
    let mut total = 0.0;
    for by in 0..ny {
        for bx in 0..nx {
            let mut norm = 0.0;
            for c in 0..s.channels {
                let mut acc = 0.0;
                for y in by * py..(by + 1) * py {
                    for xx in bx * px..(bx + 1) * px {
                        acc += x.at(c, y, xx) as f64;
                    }
                }
                let m = acc * inv;
                norm += m * m;
            }
            total += norm;
        }
    }
    total / (ny * nx) as f64
}

/// Resolution-agnostic SNR of a stage-`k` latent split into its signal and
/// noise parts. Zero noise yields `+∞`.
pub fn patch_snr(signal: &Tensor, noise: &Tensor, spec: &PatchSpec, k: usize) -> Result<f64> {
    noise.ensure_shape(signal.shape())?;
    let patch = spec.extent_at(k)?;
    let s = signal.shape();
    if !s.height.is_multiple_of(patch.0) || !s.width.is_multiple_of(patch.1) {
        return Err(invalid("patch does not tile the tensor"));
    }
    let sp = patch_power(signal, patch);
    let np = patch_power(noise, patch);
    if np == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(sp / np)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds_schedule(mode: RescaleMode) -> NoiseSchedule {
        NoiseSchedule::new(
            StageSchedule::new(2, StageKind::Linear),
            &[3072, 768, 192],
            &[1.0, 1.0],
            mode,
        )
        .unwrap()
    }

    #[test]
    fn linear_boundaries() {
        let s = StageSchedule::new(4, StageKind::Linear);
        let expected = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        for (a, b) in s.boundaries().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(StageSchedule::new(0, StageKind::Cosine).boundaries(), &[0.0, 1.0]);
        assert_eq!(StageSchedule::new(0, StageKind::Linear).boundaries(), &[0.0, 1.0]);
    }

    #[test]
    fn cosine_boundaries() {
        let s = StageSchedule::new(4, StageKind::Cosine);
        let tau = s.boundaries();
        assert_eq!(tau[0], 0.0);
        assert_eq!(tau[5], 1.0);
        // cos(0.4π) and cos(0.1π)
        assert!((tau[1] - 0.309_016_994_374_947_4).abs() < 1e-12);
        assert!((tau[4] - 0.951_056_516_295_153_5).abs() < 1e-12);
        assert!(tau.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn stage_lookup() {
        let s = StageSchedule::new(4, StageKind::Linear);
        assert_eq!(s.stage_of(0.0).unwrap(), 0);
        assert_eq!(s.stage_of(1.0).unwrap(), 4);
        assert_eq!(s.stage_of(0.2).unwrap(), 1);
        assert_eq!(s.stage_of(0.199_999).unwrap(), 0);
        assert!(matches!(s.stage_of(1.5), Err(Error::TimeOutOfRange(_))));
        assert!(s.stage_of(-0.1).is_err());
    }

    #[test]
    fn rescale_factors() {
        assert_eq!(ds_schedule(RescaleMode::SignalPreserved).rescale(), &[1.0, 0.5, 0.25]);

        let blur = NoiseSchedule::new(
            StageSchedule::new(3, StageKind::Cosine),
            &[3072; 4],
            &[1.0; 3],
            RescaleMode::SignalPreserved,
        )
        .unwrap();
        assert_eq!(blur.rescale(), &[1.0; 4]);

        let ae = NoiseSchedule::new(
            StageSchedule::new(1, StageKind::Linear),
            &[3072, 256],
            &[2.0],
            RescaleMode::SignalPreserved,
        )
        .unwrap();
        assert!((ae.rescale()[1] - 1.0 / 24f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rescale_rejects_bad_input() {
        let st = StageSchedule::new(1, StageKind::Linear);
        let m = RescaleMode::SignalPreserved;
        assert!(NoiseSchedule::new(st.clone(), &[256, 3072], &[1.0], m).is_err());
        assert!(NoiseSchedule::new(st.clone(), &[3072, 256], &[0.0], m).is_err());
        assert!(NoiseSchedule::new(st, &[3072, 256], &[-1.0], m).is_err());
    }

    #[test]
    fn eval_examples() {
        for mode in [
            RescaleMode::None,
            RescaleMode::SignalPreserved,
            RescaleMode::VariancePreserved,
        ] {
            assert_eq!(ds_schedule(mode).eval(0.0).unwrap(), (1.0, 0.0));
        }
        let one_stage = |mode| {
            NoiseSchedule::with_rescale(StageSchedule::new(0, StageKind::Linear), vec![0.5], mode)
                .unwrap()
        };
        let (a, s) = one_stage(RescaleMode::SignalPreserved).eval(0.5).unwrap();
        assert!((a - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6 && (s - 0.353_553_39).abs() < 1e-6);
        let (a, s) = one_stage(RescaleMode::VariancePreserved).eval(0.5).unwrap();
        assert!((a - 0.894_427_19).abs() < 1e-6 && (s - 0.447_213_6).abs() < 1e-6);
        assert!((a * a + s * s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sp_jump_at_boundary() {
        let ns = ds_schedule(RescaleMode::SignalPreserved);
        for k in 1..=2 {
            let tau = ns.stages().tau(k);
            let (a_before, s_before) = ns.eval_in_stage(tau, k - 1);
            let (a_after, s_after) = ns.eval(tau).unwrap();
            assert_eq!(a_before, a_after);
            assert!((s_after / s_before - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn transitions() {
        let ns = ds_schedule(RescaleMode::VariancePreserved);
        assert_eq!(ns.transition_coeffs(0.4, 0.4).unwrap(), (1.0, 0.0));
        assert!(matches!(
            ns.transition_coeffs(0.3, 0.5),
            Err(Error::CrossStage { .. })
        ));
        let plain = NoiseSchedule::with_rescale(
            StageSchedule::new(0, StageKind::Linear),
            vec![1.0],
            RescaleMode::None,
        )
        .unwrap();
        let (a, s) = plain.transition_coeffs(0.0, 0.37).unwrap();
        let (at, st) = plain.eval(0.37).unwrap();
        assert!((a - at).abs() < 1e-15 && (s - st).abs() < 1e-12);
        // closing boundary is reachable only through the explicit stage
        assert!(ns.transition_in_stage(0.5, 2.0 / 3.0, 1).is_ok());
    }

    #[test]
    fn patch_snr_unrolled() {
        // two 2x2 patches side by side, one channel
        let shape = Shape::new(1, 2, 4);
        let signal = Tensor::full(shape, 3.0);
        let noise =
            Tensor::from_vec(shape, vec![1.0, 0.0, -2.0, 0.0, 1.0, 2.0, 0.0, -2.0]).unwrap();
        let spec = PatchSpec {
            extent: (2, 2),
            domain: (2, 4),
            stage_scale: vec![(1, 1)],
        };
        // patch means: 1.0 and -1.0
        let snr = patch_snr(&signal, &noise, &spec, 0).unwrap();
        assert!((snr - 9.0 * 2.0 / 2.0).abs() < 1e-12);

        let zero = Tensor::zeros(shape);
        assert_eq!(patch_snr(&signal, &zero, &spec, 0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn patch_below_resolution_is_rejected() {
        let shapes = [Shape::new(3, 32, 32), Shape::new(3, 16, 16), Shape::new(3, 8, 8)];
        let spec = PatchSpec::from_shapes(&shapes).unwrap().with_extent((2, 2));
        assert_eq!(spec.extent_at(1).unwrap(), (1, 1));
        assert!(matches!(spec.extent_at(2), Err(Error::ResolutionLimit { stage: 2, .. })));
        let t = Tensor::zeros(shapes[2]);
        assert!(patch_snr(&t, &t, &spec, 2).is_err());
    }

    proptest! {
        #[test]
        fn vp_closure(t in 0.0f64..=1.0, r1 in 0.01f64..1.0, r2 in 0.01f64..1.0) {
            let ns = NoiseSchedule::with_rescale(
                StageSchedule::new(2, StageKind::Cosine),
                vec![1.0, r1, r1 * r2],
                RescaleMode::VariancePreserved,
            ).unwrap();
            let (a, s) = ns.eval(t).unwrap();
            prop_assert!((a * a + s * s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn chapman_kolmogorov(u in 0.0f64..1.0, v in 0.0f64..1.0, w in 0.0f64..1.0, k in 0usize..3) {
            for mode in [RescaleMode::None, RescaleMode::SignalPreserved, RescaleMode::VariancePreserved] {
                let ns = ds_schedule(mode);
                let (lo, hi) = ns.stages().span(k);
                let mut p = [lo + u * (hi - lo) * 0.999, lo + v * (hi - lo) * 0.999, lo + w * (hi - lo) * 0.999];
                p.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let [s, m, t] = p;
                let (a1, s1) = ns.transition_coeffs(s, m).unwrap();
                let (a2, s2) = ns.transition_coeffs(m, t).unwrap();
                let (a, sg) = ns.transition_coeffs(s, t).unwrap();
                prop_assert!((a1 * a2 - a).abs() < 1e-6);
                prop_assert!((a2 * a2 * s1 * s1 + s2 * s2 - sg * sg).abs() < 1e-6);
            }
        }

        #[test]
        fn snr_decreases_within_stage(u in 0.0f64..0.99, gap in 0.001f64..0.5, k in 0usize..3) {
            for mode in [RescaleMode::None, RescaleMode::SignalPreserved, RescaleMode::VariancePreserved] {
                let ns = ds_schedule(mode);
                let (lo, hi) = ns.stages().span(k);
                let t1 = lo + u * (hi - lo);
                let t2 = (t1 + gap * (hi - lo)).min(hi);
                prop_assume!(t2 > t1 && t1 > 0.0);
                prop_assert!(ns.snr_in_stage(t2, k) < ns.snr_in_stage(t1, k));
            }
        }
    }
}
