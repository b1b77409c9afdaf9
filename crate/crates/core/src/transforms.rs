//! Transformation stacks `f_0..f_K`, their approximate inverses `g`, the
//! interpolated diffusion mean `x_t` and the degradation `δ_t`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use num_traits::Float;

use crate::error::invalid;
use crate::linalg::{gemm, Op};
use crate::schedules::StageSchedule;
use crate::{rng, Error, Result, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    /// Repeated 2× bilinear reduction, bilinear upsampling as `g`.
    Downsample,
    /// Downsample then upsample back to full resolution; `g` is the identity.
    BlurUpsample,
    /// Frequency-domain Gaussian blur with growing width; `g` is the identity.
    BlurGaussian,
    /// A frozen linear autoencoder from image space to a latent grid.
    LinearAe,
}

/// How boundary noise is grouped when a stage drops dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoisePartition {
    /// Same shape on both sides of the boundary.
    Identity,
    /// Non-overlapping 2×2 spatial blocks per channel.
    Blocks2x2,
    /// Contiguous runs of `d` entries of the flattened tensor.
    FlatGroups(usize),
}

/// 2×2 box average (exact bilinear reduction for factor 2).
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(invalid("downsampling needs even spatial extents"));
    }
    let out_shape = Shape::new(s.channels, s.height / 2, s.width / 2);
    let mut out = Tensor::zeros(out_shape);
    for c in 0..s.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..out_shape.height {
            for xx in 0..out_shape.width {
                let i = 2 * y * s.width + 2 * xx;
                dst[y * out_shape.width + xx] =
                    0.25 * (src[i] + src[i + 1] + src[i + s.width] + src[i + s.width + 1]);
            }
        }
    }
    Ok(out)
}

/// Bilinear 2× upsampling with half-pixel centres and clamped edges.
pub fn upsample2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let out_shape = Shape::new(s.channels, s.height * 2, s.width * 2);
    let mut out = Tensor::zeros(out_shape);
    // Output index o samples source coordinate (o + 0.5) / 2 - 0.5, a quarter
    // pixel from source centre o / 2. Returns (near, far, far weight).
    let taps = |o: usize, n: usize| -> (usize, usize, f32) {
        let i = o / 2;
        if o.is_multiple_of(2) {
            (i, i.saturating_sub(1), if i == 0 { 0.0 } else { 0.25 })
        } else {
            (i, (i + 1).min(n - 1), if i + 1 >= n { 0.0 } else { 0.25 })
        }
    };
    for c in 0..s.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for oy in 0..out_shape.height {
            let (y0, y1, wy) = taps(oy, s.height);
            for ox in 0..out_shape.width {
                let (x0, x1, wx) = taps(ox, s.width);
                let top = (1.0 - wx) * src[y0 * s.width + x0] + wx * src[y0 * s.width + x1];
                let bottom = (1.0 - wx) * src[y1 * s.width + x0] + wx * src[y1 * s.width + x1];
                dst[oy * out_shape.width + ox] = (1.0 - wy) * top + wy * bottom;
            }
        }
    }
    out
}

/// Orthonormal DCT-II basis, `n × n`, row `k` is frequency `k`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 {
            Float::sqrt(1.0 / n as f64)
        } else {
            Float::sqrt(2.0 / n as f64)
        };
        for i in 0..n {
            d[k * n + i] = scale * Float::cos(PI * (i as f64 + 0.5) * k as f64 / n as f64);
        }
    }
    d
}

/// The `n × n` operator `Dᵀ diag(exp(-π²σ²k²/(2n²))) D` that blurs one axis.
fn blur_axis_matrix(n: usize, sigma: f64) -> Vec<f64> {
    let d = dct_matrix(n);
    let gain: Vec<f64> = (0..n)
        .map(|k| {
            let f = k as f64 / n as f64;
            Float::exp(-0.5 * PI * PI * sigma * sigma * f * f)
        })
        .collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = (0..n).map(|k| d[k * n + i] * gain[k] * d[k * n + j]).sum();
        }
    }
    m
}

/// Separable Gaussian blur applied in the DCT domain (reflecting boundary).
#[derive(Clone, Debug, PartialEq)]
pub struct DctBlur {
    sigma: f64,
    rows: Vec<f64>,
    cols: Vec<f64>,
    height: usize,
    width: usize,
}

impl DctBlur {
    pub fn new(height: usize, width: usize, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(invalid("blur width must be a non-negative number"));
        }
        Ok(Self {
            sigma,
            rows: blur_axis_matrix(height, sigma),
            cols: blur_axis_matrix(width, sigma),
            height,
            width,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.height != self.height || s.width != self.width {
            return Err(Error::ShapeMismatch {
                expected: Shape::new(s.channels, self.height, self.width),
                got: s,
            });
        }
        if self.sigma == 0.0 {
            return Ok(x.clone());
        }
        let (h, w) = (self.height, self.width);
        let mut out = Tensor::zeros(s);
        let mut plane = vec![0.0f64; h * w];
        let mut tmp = vec![0.0f64; h * w];
        let mut res = vec![0.0f64; h * w];
        for c in 0..s.channels {
            for (p, &v) in plane.iter_mut().zip(x.channel(c)) {
                *p = v as f64;
            }
            // rows ⋅ X ⋅ colsᵀ
            gemm(Op::N, Op::N, h, w, h, 1.0, &self.rows, &plane, 0.0, &mut tmp);
            gemm(Op::N, Op::T, h, w, w, 1.0, &tmp, &self.cols, 0.0, &mut res);
            for (o, &v) in out.channel_mut(c).iter_mut().zip(&res) {
                *o = v as f32;
            }
        }
        Ok(out)
    }
}

/// Gaussian blur of width `sigma` computed through the DCT.
pub fn gaussian_blur_freq(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let s = x.shape();
    DctBlur::new(s.height, s.width, sigma)?.apply(x)
}

/// Blur width of stage `k` for the Gaussian-blur stack: `15 sin²(½π τ_k)`.
pub fn blur_sigma(stages: &StageSchedule, k: usize) -> f64 {
    let tau = if k <= stages.k() { stages.tau(k) } else { 1.0 };
    let s = Float::sin(FRAC_PI_2 * tau);
    15.0 * s * s
}

/// A least-squares linear autoencoder: the encoder projects onto an
/// orthonormal basis of the dominant subspace of the training data's second
/// moment, the decoder is its transpose.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAutoencoder {
    image: Shape,
    latent: Shape,
    /// `latent.numel() × image.numel()`, row-major, orthonormal rows.
    encoder: Vec<f32>,
}

impl LinearAutoencoder {
    pub fn from_encoder(image: Shape, latent: Shape, encoder: Vec<f32>) -> Result<Self> {
        if encoder.len() != image.numel() * latent.numel() {
            return Err(Error::LengthMismatch {
                expected: image.numel() * latent.numel(),
                got: encoder.len(),
            });
        }
        if latent.numel() > image.numel() {
            return Err(invalid("latent must not be larger than the image"));
        }
        Ok(Self {
            image,
            latent,
            encoder,
        })
    }

    /// Fits the principal subspace by block power iteration with
    /// re-orthonormalisation after every sweep.
    pub fn fit(samples: &[Tensor], latent: Shape, sweeps: usize, seed: u64) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let image = first.shape();
        let (n, dim, rank) = (samples.len(), image.numel(), latent.numel());
        if rank > dim {
            return Err(invalid("latent must not be larger than the image"));
        }
        let mut data = Vec::with_capacity(n * dim);
        for s in samples {
            s.ensure_shape(image)?;
            data.extend(s.data().iter().map(|&v| v as f64));
        }
        let mut r = rng::seeded(seed);
        let start: Vec<f64> = (0..dim * rank).map(|_| rng::standard_normal(&mut r)).collect();
        let mut basis = orthonormalize(dim, rank, start);
        let mut proj = vec![0.0; n * rank];
        let mut next = vec![0.0; dim * rank];
        for _ in 0..sweeps {
            // next = Xᵀ (X Q)
            gemm(Op::N, Op::N, n, rank, dim, 1.0, &data, &basis, 0.0, &mut proj);
            gemm(Op::T, Op::N, dim, rank, n, 1.0, &data, &proj, 0.0, &mut next);
            basis = orthonormalize(dim, rank, core::mem::take(&mut next));
            next = vec![0.0; dim * rank];
        }
        // basis is dim × rank; the encoder stores its transpose
        let mut encoder = vec![0.0f32; rank * dim];
        for i in 0..dim {
            for j in 0..rank {
                encoder[j * dim + i] = basis[i * rank + j] as f32;
            }
        }
        Self::from_encoder(image, latent, encoder)
    }

    pub fn image_shape(&self) -> Shape {
        self.image
    }

    pub fn latent_shape(&self) -> Shape {
        self.latent
    }

    pub fn encoder(&self) -> &[f32] {
        &self.encoder
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        x.ensure_shape(self.image)?;
        let mut out = vec![0.0f32; self.latent.numel()];
        gemm(
            Op::N,
            Op::N,
            self.latent.numel(),
            1,
            self.image.numel(),
            1.0,
            &self.encoder,
            x.data(),
            0.0,
            &mut out,
        );
        Tensor::from_vec(self.latent, out)
    }

    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        y.ensure_shape(self.latent)?;
        let mut out = vec![0.0f32; self.image.numel()];
        gemm(
            Op::T,
            Op::N,
            self.image.numel(),
            1,
            self.latent.numel(),
            1.0,
            &self.encoder,
            y.data(),
            0.0,
            &mut out,
        );
        Tensor::from_vec(self.image, out)
    }
}

/// Orthonormal basis (thin Q factor) of the columns of a row-major `rows × cols` matrix.
fn orthonormalize(rows: usize, cols: usize, m: Vec<f64>) -> Vec<f64> {
    let q = DMatrix::from_row_slice(rows, cols, &m).qr().q();
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = q[(i, j)];
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformStack {
    kind: TransformKind,
    shapes: Vec<Shape>,
    gammas: Vec<f64>,
    /// Gaussian-blur stacks: absolute blur width per stage.
    blur_sigmas: Vec<f64>,
    blurs: Vec<DctBlur>,
    /// Incremental blurs taking stage `k - 1` to stage `k` (index `k`).
    blur_steps: Vec<DctBlur>,
    ae: Option<LinearAutoencoder>,
}

impl TransformStack {
    /// `K` halvings of both spatial extents.
    pub fn downsample(image: Shape, k: usize) -> Result<Self> {
        let mut shapes = vec![image];
        for i in 1..=k {
            let prev = shapes[i - 1];
            if prev.height % 2 != 0 || prev.width % 2 != 0 {
                return Err(invalid("image extent not divisible by 2^K"));
            }
            shapes.push(Shape::new(prev.channels, prev.height / 2, prev.width / 2));
        }
        Ok(Self {
            kind: TransformKind::Downsample,
            shapes,
            gammas: vec![1.0; k],
            blur_sigmas: Vec::new(),
            blurs: Vec::new(),
            blur_steps: Vec::new(),
            ae: None,
        })
    }

    pub fn blur_upsample(image: Shape, k: usize) -> Result<Self> {
        let mut stack = Self::downsample(image, k)?;
        stack.kind = TransformKind::BlurUpsample;
        stack.shapes = vec![image; k + 1];
        Ok(stack)
    }

    /// Gaussian blur with per-stage widths `15 sin²(½π τ_k)`.
    pub fn blur_gaussian(image: Shape, stages: &StageSchedule) -> Result<Self> {
        let k = stages.k();
        let sigmas: Vec<f64> = (0..=k).map(|i| blur_sigma(stages, i)).collect();
        Self::blur_gaussian_with(image, sigmas)
    }

    pub fn blur_gaussian_with(image: Shape, sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() || sigmas[0] != 0.0 {
            return Err(invalid("stage 0 must be unblurred"));
        }
        if sigmas.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("blur widths must be non-decreasing"));
        }
        let k = sigmas.len() - 1;
        let blurs = sigmas
            .iter()
            .map(|&s| DctBlur::new(image.height, image.width, s))
            .collect::<Result<Vec<_>>>()?;
        let mut blur_steps = vec![DctBlur::new(image.height, image.width, 0.0)?];
        for i in 1..=k {
            let inc = Float::sqrt(sigmas[i] * sigmas[i] - sigmas[i - 1] * sigmas[i - 1]);
            blur_steps.push(DctBlur::new(image.height, image.width, inc)?);
        }
        Ok(Self {
            kind: TransformKind::BlurGaussian,
            shapes: vec![image; k + 1],
            gammas: vec![1.0; k],
            blur_sigmas: sigmas,
            blurs,
            blur_steps,
            ae: None,
        })
    }

    /// One boundary: image → latent. `γ` defaults to 1 until estimated.
    pub fn linear_ae(ae: LinearAutoencoder) -> Self {
        Self {
            kind: TransformKind::LinearAe,
            shapes: vec![ae.image_shape(), ae.latent_shape()],
            gammas: vec![1.0],
            blur_sigmas: Vec::new(),
            blurs: Vec::new(),
            blur_steps: Vec::new(),
            ae: Some(ae),
        }
    }

    pub fn with_gammas(mut self, gammas: Vec<f64>) -> Result<Self> {
        if gammas.len() != self.k() {
            return Err(invalid("need one signal-power ratio per boundary"));
        }
        if gammas.iter().any(|&g| !(g > 0.0)) {
            return Err(invalid("signal-power ratios must be positive"));
        }
        self.gammas = gammas;
        Ok(self)
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    /// Number of boundaries `K`.
    pub fn k(&self) -> usize {
        self.shapes.len() - 1
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn shape(&self, k: usize) -> Shape {
        self.shapes[k]
    }

    /// Flat sizes `M_0..M_K`.
    pub fn dims(&self) -> Vec<usize> {
        self.shapes.iter().map(Shape::numel).collect()
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn blur_sigmas(&self) -> &[f64] {
        &self.blur_sigmas
    }

    pub fn autoencoder(&self) -> Option<&LinearAutoencoder> {
        self.ae.as_ref()
    }

    /// Dimension ratio `d_k = M_{k-1} / M_k` for boundary `k ≥ 1`.
    pub fn ratio(&self, k: usize) -> usize {
        self.shapes[k - 1].numel() / self.shapes[k].numel()
    }

    pub fn partition(&self, k: usize) -> NoisePartition {
        match self.kind {
            TransformKind::Downsample => NoisePartition::Blocks2x2,
            TransformKind::BlurUpsample | TransformKind::BlurGaussian => NoisePartition::Identity,
            TransformKind::LinearAe => NoisePartition::FlatGroups(self.ratio(k)),
        }
    }

    fn check_stage(&self, k: usize) -> Result<()> {
        if k > self.k() {
            return Err(Error::StageOutOfRange {
                stage: k,
                stages: self.shapes.len(),
            });
        }
        Ok(())
    }

    /// `x^k = f_{0:k}(x)`.
    pub fn forward_to_stage(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        self.check_stage(k)?;
        x.ensure_shape(self.shapes[0])?;
        match self.kind {
            TransformKind::Downsample => {
                let mut y = x.clone();
                for _ in 0..k {
                    y = downsample2(&y)?;
                }
                Ok(y)
            }
            TransformKind::BlurUpsample => {
                let mut y = x.clone();
                for _ in 0..k {
                    y = downsample2(&y)?;
                }
                for _ in 0..k {
                    y = upsample2(&y);
                }
                Ok(y)
            }
            TransformKind::BlurGaussian => self.blurs[k].apply(x),
            TransformKind::LinearAe => {
                if k == 0 {
                    Ok(x.clone())
                } else {
                    self.ae.as_ref().expect("autoencoder stack").encode(x)
                }
            }
        }
    }

    /// The single step `f_k` from stage `k - 1` to stage `k`. For the
    /// upsampling blur the step is only defined through the pyramid, so it
    /// is not available there.
    pub fn forward_step(&self, x_prev: &Tensor, k: usize) -> Result<Tensor> {
        if k == 0 {
            return Err(invalid("stage 0 has no incoming step"));
        }
        self.check_stage(k)?;
        x_prev.ensure_shape(self.shapes[k - 1])?;
        match self.kind {
            TransformKind::Downsample => downsample2(x_prev),
            TransformKind::BlurGaussian => self.blur_steps[k].apply(x_prev),
            TransformKind::LinearAe => self.ae.as_ref().expect("autoencoder stack").encode(x_prev),
            TransformKind::BlurUpsample => Err(invalid(
                "upsampling blur steps are defined on the pyramid, use forward_to_stage",
            )),
        }
    }

    /// `g_k`: maps a stage-`k` tensor back to stage `k - 1`.
    pub fn g_map(&self, xk: &Tensor, k: usize) -> Result<Tensor> {
        if k == 0 {
            return Err(invalid("stage 0 has no predecessor"));
        }
        self.check_stage(k)?;
        xk.ensure_shape(self.shapes[k])?;
        match self.kind {
            TransformKind::Downsample => Ok(upsample2(xk)),
            TransformKind::BlurUpsample | TransformKind::BlurGaussian => Ok(xk.clone()),
            TransformKind::LinearAe => self.ae.as_ref().expect("autoencoder stack").decode(xk),
        }
    }

    /// `(x^k, x̂^k)` where `x̂^k = g_{k+1}(x^{k+1})`, and `x̂^K = x^K`.
    pub fn stage_pair(&self, x: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
        let xk = self.forward_to_stage(x, k)?;
        if k == self.k() {
            return Ok((xk.clone(), xk));
        }
        let next = match self.kind {
            TransformKind::BlurUpsample => self.forward_to_stage(x, k + 1)?,
            _ => self.forward_step(&xk, k + 1)?,
        };
        let approx = self.g_map(&next, k + 1)?;
        Ok((xk, approx))
    }

    /// `(x_t, δ_t)` at time `t` for the stage `stage_of(t)`.
    pub fn interpolated_target(
        &self,
        stages: &StageSchedule,
        x: &Tensor,
        t: f64,
    ) -> Result<(Tensor, Tensor)> {
        let k = stages.stage_of(t)?;
        self.interpolated_target_in_stage(stages, x, t, k)
    }

    /// `(x_t, δ_t)` with the stage given, so `t = τ_{k+1}` gives the right
    /// endpoint `x̂^k` of stage `k`.
    pub fn interpolated_target_in_stage(
        &self,
        stages: &StageSchedule,
        x: &Tensor,
        t: f64,
        k: usize,
    ) -> Result<(Tensor, Tensor)> {
        if stages.k() != self.k() {
            return Err(invalid("stage schedule and transform stack disagree on K"));
        }
        if !stages.in_closure(t, k) {
            return Err(Error::TimeOutOfRange(t));
        }
        let (xk, approx) = self.stage_pair(x, k)?;
        Ok(interpolate(&xk, &approx, stages.span(k), t))
    }
}

/// Mixes `x^k` and `x̂^k` linearly over the stage span; returns `(x_t, x^k − x_t)`.
pub fn interpolate(xk: &Tensor, approx: &Tensor, span: (f64, f64), t: f64) -> (Tensor, Tensor) {
    let (lo, hi) = span;
    let w = (t - lo) / (hi - lo);
    let xt = xk.lincomb(1.0 - w, approx, w).expect("stage pair shapes agree");
    let delta = xk.sub(&xt).expect("same shape");
    (xt, delta)
}

/// Monte-Carlo estimate of `E‖g_k(x^k)‖² / E‖x^k‖²` with per-element power.
pub fn estimate_gamma<'a>(
    stack: &TransformStack,
    dataset: impl IntoIterator<Item = &'a Tensor>,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(invalid("signal-power ratio is defined for boundaries k >= 1"));
    }
    stack.check_stage(k)?;
    let (mut num, mut den, mut count) = (0.0, 0.0, 0usize);
    for x in dataset {
        let xk = stack.forward_to_stage(x, k)?;
        let back = stack.g_map(&xk, k)?;
        num += back.mean_sq();
        den += xk.mean_sq();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    if den == 0.0 {
        return Err(invalid("stage-k signal has zero power"));
    }
    Ok(num / den)
}
