//! The double-prediction denoiser: a small convolutional encoder-decoder
//! shared by every stage, with per-shape 1×1 input/output adapters, that
//! predicts the injected noise `ε_θ` and the degradation `δ_θ` at once.
//!
//! Activations are stored channel-major over the batch, `[C, N, H, W]`, so a
//! convolution over a whole batch is a single matrix product. The backward
//! pass is written out by hand.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;

use crate::diffusion::LatentState;
use crate::error::invalid;
use crate::linalg::{gemm, Op};
use crate::schedules::NoiseSchedule;
use crate::{rng, Error, Real, Result, Shape, Tensor};

/// What the network's first output head means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Parameterization {
    /// The head is `ε_θ` itself.
    Epsilon,
    /// The head is the velocity `v = ᾱ ε − σ̄ x` of the unit-norm latent;
    /// `ε_θ = σ̄ ẑ + ᾱ v` and `x_θ = ᾱ ẑ − σ̄ v` with `ẑ = z / sqrt(α² + σ²)`.
    /// Both stay well conditioned as `α → 0`.
    Velocity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of sinusoid frequencies for `t` (two features each).
    pub time_frequencies: usize,
    /// Number of sinusoid frequencies for the stage index.
    pub stage_frequencies: usize,
    pub parameterization: Parameterization,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 40,
            time_frequencies: 6,
            stage_frequencies: 2,
            parameterization: Parameterization::Velocity,
        }
    }
}

impl DenoiserConfig {
    fn embed_dim(&self) -> usize {
        2 * (self.time_frequencies + self.stage_frequencies)
    }
}

/// `(ε_θ, δ_θ)` for one latent, plus the denoised estimate `x_θ` computed in
/// the numerically stable form of the parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub eps: Tensor,
    pub delta: Tensor,
    pub x: Tensor,
}

/// A named parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, dims: Vec<usize>) -> usize {
        let offset = self.total;
        let entry = ParamEntry {
            name,
            dims,
            offset,
        };
        self.total += entry.len();
        self.entries.push(entry);
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Slots {
    embed: Dense,
    proj1: Dense,
    proj2: Dense,
    conv1: Dense,
    conv2: Dense,
    conv3: Dense,
    conv4: Dense,
    adapters_in: Vec<Dense>,
    adapters_out: Vec<Dense>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T: Real = f32> {
    config: DenoiserConfig,
    stage_shapes: Vec<Shape>,
    /// Stage index → adapter index (one adapter per distinct shape).
    adapter_of_stage: Vec<usize>,
    adapter_shapes: Vec<Shape>,
    layout: ParamLayout,
    slots: Slots,
    params: Vec<T>,
}

/// Everything the backward pass needs from one forward pass.
struct Trace<T> {
    n: usize,
    hw: usize,
    h: usize,
    w: usize,
    cin: usize,
    adapter: usize,
    /// Per sample `(c_in, ᾱ, σ̄, α, σ)`.
    pre: Vec<[T; 5]>,
    zin: Vec<T>,
    feats: Vec<T>,
    emb_pre: Vec<T>,
    emb: Vec<T>,
    h0: Vec<T>,
    a1: Vec<T>,
    q: Vec<T>,
    a2: Vec<T>,
    h2: Vec<T>,
    a3: Vec<T>,
    cat: Vec<T>,
    a4: Vec<T>,
    h4: Vec<T>,
}

/// Sample-major outputs `[N, C, H, W]`.
pub struct BatchOutput<T> {
    pub eps: Vec<T>,
    pub delta: Vec<T>,
    pub x: Vec<T>,
}

/// Upstream gradients for a batch, sample-major like the outputs.
pub struct BatchGrad<'a, T> {
    pub eps: Option<&'a [T]>,
    pub delta: Option<&'a [T]>,
    pub x: Option<&'a [T]>,
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn silu<T: Real>(v: T) -> T {
    v * sigmoid(v)
}

fn silu_grad<T: Real>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

/// `[C, N·H·W]` → `[C·9, N·H·W]` with zero padding of one pixel.
fn im2col<T: Real>(x: &[T], c: usize, n: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let cols = n * hw;
    let mut out = vec![T::zero(); c * 9 * cols];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols;
                for ni in 0..n {
                    let src = &x[(ci * n + ni) * hw..(ci * n + ni + 1) * hw];
                    let dst = &mut out[row + ni * hw..row + (ni + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let (x_lo, x_hi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                        for xx in x_lo..x_hi {
                            dst[y * w + xx] = src[sy * w + xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(col: &[T], c: usize, n: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let cols = n * hw;
    let mut out = vec![T::zero(); c * cols];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols;
                for ni in 0..n {
                    let src = &col[row + ni * hw..row + (ni + 1) * hw];
                    let dst = &mut out[(ci * n + ni) * hw..(ci * n + ni + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let (x_lo, x_hi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                        for xx in x_lo..x_hi {
                            dst[sy * w + xx + kx - 1] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 average pooling of `[C·N]` planes of `h × w`.
fn avgpool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * w + 2 * xx;
                dst[y * w2 + xx] = quarter * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

fn avgpool2_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    for p in 0..planes {
        let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] += quarter * src[(y / 2) * w2 + xx / 2];
            }
        }
    }
}

/// Nearest-neighbour 2× upsampling of planes of `h × w`.
fn upsample_nearest2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn upsample_nearest2_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    out
}

/// Adds `bias[c]` to every element of channel `c` in `[C, cols]`.
fn add_bias<T: Real>(y: &mut [T], bias: &[T], cols: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut y[c * cols..(c + 1) * cols] {
            *v += b;
        }
    }
}

/// Adds `per[c * n + i]` over the plane of sample `i`, channel `c`.
fn add_per_sample<T: Real>(y: &mut [T], per: &[T], c: usize, n: usize, hw: usize) {
    for ci in 0..c {
        for ni in 0..n {
            let b = per[ci * n + ni];
            for v in &mut y[(ci * n + ni) * hw..(ci * n + ni + 1) * hw] {
                *v += b;
            }
        }
    }
}

fn sum_planes<T: Real>(g: &[T], c: usize, n: usize, hw: usize) -> Vec<T> {
    (0..c * n)
        .map(|p| g[p * hw..(p + 1) * hw].iter().copied().sum())
        .collect()
}

fn row_sums<T: Real>(g: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        out[r] += g[r * cols..(r + 1) * cols].iter().copied().sum();
    }
}

/// Sinusoidal features of `t` and of the stage index.
fn features<T: Real>(cfg: &DenoiserConfig, t: f64, k: usize) -> Vec<T> {
    let mut f = Vec::with_capacity(cfg.embed_dim());
    for j in 0..cfg.time_frequencies {
        let w = PI * (1u64 << j) as f64;
        f.push(T::c(Float::sin(w * t)));
        f.push(T::c(Float::cos(w * t)));
    }
    for j in 0..cfg.stage_frequencies {
        let w = PI / 8.0 * (1u64 << j) as f64;
        f.push(T::c(Float::sin(w * k as f64)));
        f.push(T::c(Float::cos(w * k as f64)));
    }
    f
}

impl<T: Real> Denoiser<T> {
    /// A freshly initialised network for the given per-stage shapes. Spatial
    /// extents must be even. Output adapters start at zero.
    pub fn new(config: DenoiserConfig, stage_shapes: &[Shape], seed: u64) -> Result<Self> {
        if stage_shapes.is_empty() {
            return Err(invalid("no stage shapes"));
        }
        if config.base_channels == 0 {
            return Err(invalid("base_channels must be positive"));
        }
        let mut adapter_shapes: Vec<Shape> = Vec::new();
        let mut adapter_of_stage = Vec::with_capacity(stage_shapes.len());
        for s in stage_shapes {
            if s.height % 2 != 0 || s.width % 2 != 0 || s.height < 2 || s.width < 2 {
                return Err(invalid(format!("stage shape {s} needs even spatial extents")));
            }
            let idx = match adapter_shapes.iter().position(|a| a == s) {
                Some(i) => i,
                None => {
                    adapter_shapes.push(*s);
                    adapter_shapes.len() - 1
                }
            };
            adapter_of_stage.push(idx);
        }
        let c = config.base_channels;
        let e = config.embed_dim();
        let mut layout = ParamLayout::default();
        let dense = |layout: &mut ParamLayout, name: &str, out: usize, inp: usize| Dense {
            w: layout.push(format!("{name}.weight"), vec![out, inp]),
            b: layout.push(format!("{name}.bias"), vec![out]),
        };
        let embed = dense(&mut layout, "embed", c, e);
        let proj1 = dense(&mut layout, "embed.proj1", c, c);
        let proj2 = dense(&mut layout, "embed.proj2", c, c);
        let conv1 = dense(&mut layout, "trunk.conv1", c, c * 9);
        let conv2 = dense(&mut layout, "trunk.conv2", c, c * 9);
        let conv3 = dense(&mut layout, "trunk.conv3", c, c * 9);
        let conv4 = dense(&mut layout, "trunk.conv4", c, 2 * c * 9);
        let mut adapters_in = Vec::new();
        let mut adapters_out = Vec::new();
        for (i, s) in adapter_shapes.iter().enumerate() {
            adapters_in.push(dense(&mut layout, &format!("adapter{i}.in"), c, s.channels));
            adapters_out.push(dense(&mut layout, &format!("adapter{i}.out"), 2 * s.channels, c));
        }
        let slots = Slots {
            embed,
            proj1,
            proj2,
            conv1,
            conv2,
            conv3,
            conv4,
            adapters_in,
            adapters_out,
        };
        let mut params = vec![T::zero(); layout.total()];
        let mut r = rng::seeded(seed);
        let out_weights: Vec<usize> = slots.adapters_out.iter().map(|d| d.w).collect();
        for (i, entry) in layout.entries().iter().enumerate() {
            if entry.dims.len() != 2 || out_weights.contains(&i) {
                continue;
            }
            let fan_in = entry.dims[1] as f64;
            let std = Float::sqrt(2.0 / fan_in);
            for p in &mut params[entry.range()] {
                *p = T::c(std * rng::standard_normal(&mut r));
            }
        }
        Ok(Self {
            config,
            stage_shapes: stage_shapes.to_vec(),
            adapter_of_stage,
            adapter_shapes,
            layout,
            slots,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn stage_shapes(&self) -> &[Shape] {
        &self.stage_shapes
    }

    pub fn adapter_shapes(&self) -> &[Shape] {
        &self.adapter_shapes
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// The same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config,
            stage_shapes: self.stage_shapes.clone(),
            adapter_of_stage: self.adapter_of_stage.clone(),
            adapter_shapes: self.adapter_shapes.clone(),
            layout: self.layout.clone(),
            slots: self.slots.clone(),
            params: self
                .params
                .iter()
                .map(|p| U::c(p.to_f64().unwrap()))
                .collect(),
        }
    }

    fn slice(&self, slot: usize) -> &[T] {
        &self.params[self.layout.entries[slot].range()]
    }

    fn adapter_for(&self, k: usize) -> Result<usize> {
        self.adapter_of_stage
            .get(k)
            .copied()
            .ok_or(Error::UnregisteredStage { stage: k })
    }

    /// Forward pass over a batch of stage-`k` latents stored sample-major.
    fn run(&self, ns: &NoiseSchedule, z: &[T], times: &[f64], k: usize) -> Result<(BatchOutput<T>, Trace<T>)> {
        let adapter = self.adapter_for(k)?;
        let shape = self.stage_shapes[k];
        let n = times.len();
        if z.len() != n * shape.numel() {
            return Err(Error::LengthMismatch {
                expected: n * shape.numel(),
                got: z.len(),
            });
        }
        let (cin, h, w) = (shape.channels, shape.height, shape.width);
        let hw = h * w;
        let cols = n * hw;
        let c = self.config.base_channels;
        let e = self.config.embed_dim();

        let pre: Vec<[T; 5]> = times
            .iter()
            .map(|&t| {
                let (a, s) = ns.eval_in_stage(t, k);
                let norm = Float::hypot(a, s);
                [T::c(1.0 / norm), T::c(a / norm), T::c(s / norm), T::c(a), T::c(s)]
            })
            .collect();

        // scaled input, channel-major
        let mut zin = vec![T::zero(); cin * cols];
        for ni in 0..n {
            let scale = pre[ni][0];
            for ci in 0..cin {
                let src = &z[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                let dst = &mut zin[(ci * n + ni) * hw..(ci * n + ni + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s * scale;
                }
            }
        }

        // embedding: feats [E, N] → emb [C, N] → projections [C, N]
        let mut feats = vec![T::zero(); e * n];
        for (ni, &t) in times.iter().enumerate() {
            for (j, v) in features::<T>(&self.config, t, k).into_iter().enumerate() {
                feats[j * n + ni] = v;
            }
        }
        let s = &self.slots;
        let mut emb_pre = vec![T::zero(); c * n];
        gemm(Op::N, Op::N, c, n, e, T::one(), self.slice(s.embed.w), &feats, T::zero(), &mut emb_pre);
        add_bias(&mut emb_pre, self.slice(s.embed.b), n);
        let emb: Vec<T> = emb_pre.iter().map(|&v| silu(v)).collect();
        let mut p1 = vec![T::zero(); c * n];
        gemm(Op::N, Op::N, c, n, c, T::one(), self.slice(s.proj1.w), &emb, T::zero(), &mut p1);
        add_bias(&mut p1, self.slice(s.proj1.b), n);
        let mut p2 = vec![T::zero(); c * n];
        gemm(Op::N, Op::N, c, n, c, T::one(), self.slice(s.proj2.w), &emb, T::zero(), &mut p2);
        add_bias(&mut p2, self.slice(s.proj2.b), n);

        // input adapter + time conditioning
        let ain = s.adapters_in[adapter];
        let mut h0 = vec![T::zero(); c * cols];
        gemm(Op::N, Op::N, c, cols, cin, T::one(), self.slice(ain.w), &zin, T::zero(), &mut h0);
        add_bias(&mut h0, self.slice(ain.b), cols);
        add_per_sample(&mut h0, &p1, c, n, hw);

        // level 1
        let col = im2col(&h0, c, n, h, w);
        let mut a1 = vec![T::zero(); c * cols];
        gemm(Op::N, Op::N, c, cols, c * 9, T::one(), self.slice(s.conv1.w), &col, T::zero(), &mut a1);
        drop(col);
        add_bias(&mut a1, self.slice(s.conv1.b), cols);
        let h1: Vec<T> = a1.iter().map(|&v| silu(v)).collect();

        // level 2
        let (h2d, w2d) = (h / 2, w / 2);
        let hw2 = h2d * w2d;
        let cols2 = n * hw2;
        let mut q = avgpool2(&h1, c * n, h, w);
        add_per_sample(&mut q, &p2, c, n, hw2);
        let col = im2col(&q, c, n, h2d, w2d);
        let mut a2 = vec![T::zero(); c * cols2];
        gemm(Op::N, Op::N, c, cols2, c * 9, T::one(), self.slice(s.conv2.w), &col, T::zero(), &mut a2);
        add_bias(&mut a2, self.slice(s.conv2.b), cols2);
        let h2: Vec<T> = a2.iter().map(|&v| silu(v)).collect();
        let col = im2col(&h2, c, n, h2d, w2d);
        let mut a3 = vec![T::zero(); c * cols2];
        gemm(Op::N, Op::N, c, cols2, c * 9, T::one(), self.slice(s.conv3.w), &col, T::zero(), &mut a3);
        add_bias(&mut a3, self.slice(s.conv3.b), cols2);
        let h3: Vec<T> = a3.iter().map(|&v| silu(v)).collect();

        // decoder with skip connection
        let mut cat = upsample_nearest2(&h3, c * n, h2d, w2d);
        cat.extend_from_slice(&h1);
        let col = im2col(&cat, 2 * c, n, h, w);
        let mut a4 = vec![T::zero(); c * cols];
        gemm(Op::N, Op::N, c, cols, 2 * c * 9, T::one(), self.slice(s.conv4.w), &col, T::zero(), &mut a4);
        drop(col);
        add_bias(&mut a4, self.slice(s.conv4.b), cols);
        let h4: Vec<T> = a4.iter().map(|&v| silu(v)).collect();

        // output adapter: [2 cin, cols]
        let aout = s.adapters_out[adapter];
        let mut raw = vec![T::zero(); 2 * cin * cols];
        gemm(Op::N, Op::N, 2 * cin, cols, c, T::one(), self.slice(aout.w), &h4, T::zero(), &mut raw);
        add_bias(&mut raw, self.slice(aout.b), cols);

        let numel = shape.numel();
        let mut out = BatchOutput {
            eps: vec![T::zero(); n * numel],
            delta: vec![T::zero(); n * numel],
            x: vec![T::zero(); n * numel],
        };
        for ni in 0..n {
            let [_, ab, sb, a, sg] = pre[ni];
            for ci in 0..cin {
                let head = &raw[(ci * n + ni) * hw..(ci * n + ni + 1) * hw];
                let dhead = &raw[((cin + ci) * n + ni) * hw..((cin + ci) * n + ni + 1) * hw];
                let zn = &zin[(ci * n + ni) * hw..(ci * n + ni + 1) * hw];
                let zraw = &z[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                let o = (ni * cin + ci) * hw;
                for p in 0..hw {
                    let (eps, x) = match self.config.parameterization {
                        Parameterization::Velocity => {
                            (sb * zn[p] + ab * head[p], ab * zn[p] - sb * head[p])
                        }
                        Parameterization::Epsilon => {
                            let alpha = if a < T::c(1e-6) { T::c(1e-6) } else { a };
                            (head[p], (zraw[p] - sg * head[p]) / alpha)
                        }
                    };
                    out.eps[o + p] = eps;
                    out.x[o + p] = x;
                    out.delta[o + p] = dhead[p];
                }
            }
        }
        let trace = Trace {
            n,
            hw,
            h,
            w,
            cin,
            adapter,
            pre,
            zin,
            feats,
            emb_pre,
            emb,
            h0,
            a1,
            q,
            a2,
            h2,
            a3,
            cat,
            a4,
            h4,
        };
        Ok((out, trace))
    }

    /// Forward pass for raw sample-major buffers.
    pub fn forward(&self, ns: &NoiseSchedule, z: &[T], times: &[f64], k: usize) -> Result<BatchOutput<T>> {
        Ok(self.run(ns, z, times, k)?.0)
    }

    /// Forward and backward pass. Accumulates parameter gradients into
    /// `grads` (same layout as the parameters) and returns the gradient with
    /// respect to the input latents, sample-major.
    pub fn forward_backward(
        &self,
        ns: &NoiseSchedule,
        z: &[T],
        times: &[f64],
        k: usize,
        upstream: impl FnOnce(&BatchOutput<T>) -> (Vec<T>, Vec<T>, Vec<T>),
        grads: &mut [T],
    ) -> Result<(BatchOutput<T>, Vec<T>)> {
        if grads.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let (out, tr) = self.run(ns, z, times, k)?;
        let (g_eps, g_delta, g_x) = upstream(&out);
        let gz = self.backward(
            &tr,
            BatchGrad {
                eps: Some(&g_eps),
                delta: Some(&g_delta),
                x: Some(&g_x),
            },
            grads,
        );
        Ok((out, gz))
    }

    fn grad_slice<'g>(&self, grads: &'g mut [T], slot: usize) -> &'g mut [T] {
        &mut grads[self.layout.entries[slot].range()]
    }

    fn backward(&self, tr: &Trace<T>, up: BatchGrad<'_, T>, grads: &mut [T]) -> Vec<T> {
        let (n, hw, h, w, cin) = (tr.n, tr.hw, tr.h, tr.w, tr.cin);
        let cols = n * hw;
        let c = self.config.base_channels;
        let e = self.config.embed_dim();
        let s = &self.slots;
        let (h2d, w2d) = (h / 2, w / 2);
        let hw2 = h2d * w2d;
        let cols2 = n * hw2;

        // heads → raw gradient [2 cin, cols] and direct input gradient
        let mut g_raw = vec![T::zero(); 2 * cin * cols];
        let mut g_zin = vec![T::zero(); cin * cols];
        let mut g_z_direct = vec![T::zero(); n * cin * hw];
        let get = |buf: Option<&[T]>, i: usize| buf.map_or(T::zero(), |b| b[i]);
        for ni in 0..n {
            let [_, ab, sb, a, sg] = tr.pre[ni];
            for ci in 0..cin {
                let o = (ni * cin + ci) * hw;
                let r = (ci * n + ni) * hw;
                let rd = ((cin + ci) * n + ni) * hw;
                for p in 0..hw {
                    let ge = get(up.eps, o + p);
                    let gx = get(up.x, o + p);
                    match self.config.parameterization {
                        Parameterization::Velocity => {
                            g_raw[r + p] = ab * ge - sb * gx;
                            g_zin[r + p] = sb * ge + ab * gx;
                        }
                        Parameterization::Epsilon => {
                            let alpha = if a < T::c(1e-6) { T::c(1e-6) } else { a };
                            g_raw[r + p] = ge - sg / alpha * gx;
                            g_z_direct[o + p] = gx / alpha;
                        }
                    }
                    g_raw[rd + p] = get(up.delta, o + p);
                }
            }
        }

        // output adapter
        let aout = s.adapters_out[tr.adapter];
        gemm(Op::N, Op::T, 2 * cin, c, cols, T::one(), &g_raw, &tr.h4, T::one(), self.grad_slice(grads, aout.w));
        row_sums(&g_raw, 2 * cin, cols, self.grad_slice(grads, aout.b));
        let mut g_a4 = vec![T::zero(); c * cols];
        gemm(Op::T, Op::N, c, cols, 2 * cin, T::one(), self.slice(aout.w), &g_raw, T::zero(), &mut g_a4);
        for (g, &a) in g_a4.iter_mut().zip(&tr.a4) {
            *g *= silu_grad(a);
        }

        // conv4
        let col = im2col(&tr.cat, 2 * c, n, h, w);
        gemm(Op::N, Op::T, c, 2 * c * 9, cols, T::one(), &g_a4, &col, T::one(), self.grad_slice(grads, s.conv4.w));
        drop(col);
        row_sums(&g_a4, c, cols, self.grad_slice(grads, s.conv4.b));
        let mut g_col = vec![T::zero(); 2 * c * 9 * cols];
        gemm(Op::T, Op::N, 2 * c * 9, cols, c, T::one(), self.slice(s.conv4.w), &g_a4, T::zero(), &mut g_col);
        let g_cat = col2im(&g_col, 2 * c, n, h, w);
        drop(g_col);
        let (g_u, g_h1_skip) = g_cat.split_at(c * cols);
        let mut g_h1 = g_h1_skip.to_vec();

        // level 2
        let mut g_a3 = upsample_nearest2_backward(g_u, c * n, h2d, w2d);
        for (g, &a) in g_a3.iter_mut().zip(&tr.a3) {
            *g *= silu_grad(a);
        }
        let col = im2col(&tr.h2, c, n, h2d, w2d);
        gemm(Op::N, Op::T, c, c * 9, cols2, T::one(), &g_a3, &col, T::one(), self.grad_slice(grads, s.conv3.w));
        row_sums(&g_a3, c, cols2, self.grad_slice(grads, s.conv3.b));
        let mut g_col = vec![T::zero(); c * 9 * cols2];
        gemm(Op::T, Op::N, c * 9, cols2, c, T::one(), self.slice(s.conv3.w), &g_a3, T::zero(), &mut g_col);
        let mut g_a2 = col2im(&g_col, c, n, h2d, w2d);
        for (g, &a) in g_a2.iter_mut().zip(&tr.a2) {
            *g *= silu_grad(a);
        }
        let col = im2col(&tr.q, c, n, h2d, w2d);
        gemm(Op::N, Op::T, c, c * 9, cols2, T::one(), &g_a2, &col, T::one(), self.grad_slice(grads, s.conv2.w));
        row_sums(&g_a2, c, cols2, self.grad_slice(grads, s.conv2.b));
        gemm(Op::T, Op::N, c * 9, cols2, c, T::one(), self.slice(s.conv2.w), &g_a2, T::zero(), &mut g_col);
        let g_q = col2im(&g_col, c, n, h2d, w2d);
        let g_p2 = sum_planes(&g_q, c, n, hw2);
        avgpool2_backward(&g_q, c * n, h, w, &mut g_h1);

        // level 1
        let mut g_a1 = g_h1;
        for (g, &a) in g_a1.iter_mut().zip(&tr.a1) {
            *g *= silu_grad(a);
        }
        let col = im2col(&tr.h0, c, n, h, w);
        gemm(Op::N, Op::T, c, c * 9, cols, T::one(), &g_a1, &col, T::one(), self.grad_slice(grads, s.conv1.w));
        drop(col);
        row_sums(&g_a1, c, cols, self.grad_slice(grads, s.conv1.b));
        let mut g_col = vec![T::zero(); c * 9 * cols];
        gemm(Op::T, Op::N, c * 9, cols, c, T::one(), self.slice(s.conv1.w), &g_a1, T::zero(), &mut g_col);
        let g_h0 = col2im(&g_col, c, n, h, w);
        drop(g_col);
        let g_p1 = sum_planes(&g_h0, c, n, hw);

        // input adapter
        let ain = s.adapters_in[tr.adapter];
        gemm(Op::N, Op::T, c, cin, cols, T::one(), &g_h0, &tr.zin, T::one(), self.grad_slice(grads, ain.w));
        row_sums(&g_h0, c, cols, self.grad_slice(grads, ain.b));
        gemm(Op::T, Op::N, cin, cols, c, T::one(), self.slice(ain.w), &g_h0, T::one(), &mut g_zin);

        // embedding
        gemm(Op::N, Op::T, c, c, n, T::one(), &g_p1, &tr.emb, T::one(), self.grad_slice(grads, s.proj1.w));
        row_sums(&g_p1, c, n, self.grad_slice(grads, s.proj1.b));
        gemm(Op::N, Op::T, c, c, n, T::one(), &g_p2, &tr.emb, T::one(), self.grad_slice(grads, s.proj2.w));
        row_sums(&g_p2, c, n, self.grad_slice(grads, s.proj2.b));
        let mut g_emb = vec![T::zero(); c * n];
        gemm(Op::T, Op::N, c, n, c, T::one(), self.slice(s.proj1.w), &g_p1, T::zero(), &mut g_emb);
        gemm(Op::T, Op::N, c, n, c, T::one(), self.slice(s.proj2.w), &g_p2, T::one(), &mut g_emb);
        for (g, &a) in g_emb.iter_mut().zip(&tr.emb_pre) {
            *g *= silu_grad(a);
        }
        gemm(Op::N, Op::T, c, e, n, T::one(), &g_emb, &tr.feats, T::one(), self.grad_slice(grads, s.embed.w));
        row_sums(&g_emb, c, n, self.grad_slice(grads, s.embed.b));

        // back to sample-major input gradient
        let mut g_z = g_z_direct;
        for ni in 0..n {
            let scale = tr.pre[ni][0];
            for ci in 0..cin {
                let src = &g_zin[(ci * n + ni) * hw..(ci * n + ni + 1) * hw];
                let dst = &mut g_z[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * scale;
                }
            }
        }
        g_z
    }
}

impl Denoiser<f32> {
    /// Predictions for a batch of latents that share stage `k`.
    pub fn predict_batch(
        &self,
        ns: &NoiseSchedule,
        zs: &[&Tensor],
        times: &[f64],
        k: usize,
    ) -> Result<Vec<DenoiserOutput>> {
        if zs.len() != times.len() {
            return Err(invalid("one time per latent"));
        }
        let shape = *self
            .stage_shapes
            .get(k)
            .ok_or(Error::UnregisteredStage { stage: k })?;
        let mut flat = Vec::with_capacity(zs.len() * shape.numel());
        for z in zs {
            z.ensure_shape(shape)?;
            flat.extend_from_slice(z.data());
        }
        let out = self.forward(ns, &flat, times, k)?;
        let numel = shape.numel();
        (0..zs.len())
            .map(|i| {
                let r = i * numel..(i + 1) * numel;
                Ok(DenoiserOutput {
                    eps: Tensor::from_vec(shape, out.eps[r.clone()].to_vec())?,
                    delta: Tensor::from_vec(shape, out.delta[r.clone()].to_vec())?,
                    x: Tensor::from_vec(shape, out.x[r].to_vec())?,
                })
            })
            .collect()
    }

    pub fn predict(&self, ns: &NoiseSchedule, z: &LatentState) -> Result<DenoiserOutput> {
        Ok(self.predict_batch(ns, &[&z.z], &[z.t], z.k)?.remove(0))
    }

    /// Gradient of `⟨g_x, x_θ(z)⟩` with respect to `z` for one latent.
    pub fn x_input_grad(&self, ns: &NoiseSchedule, z: &LatentState, g_x: &Tensor) -> Result<Tensor> {
        let shape = z.z.shape();
        g_x.ensure_shape(shape)?;
        let (_, tr) = self.run(ns, z.z.data(), &[z.t], z.k)?;
        let mut scratch = vec![0.0f32; self.params.len()];
        let g = self.backward(
            &tr,
            BatchGrad {
                eps: None,
                delta: None,
                x: Some(g_x.data()),
            },
            &mut scratch,
        );
        Tensor::from_vec(shape, g)
    }
}

/// `x_θ = (z − σ_t ε_θ) / α_t`. When `α_t < 1e−6` the inversion is evaluated
/// at `1 − dt/2` instead.
pub fn x_from_eps(ns: &NoiseSchedule, z: &LatentState, eps: &Tensor, dt: f64) -> Result<Tensor> {
    eps.ensure_shape(z.z.shape())?;
    let (mut a, mut s) = ns.eval_in_stage(z.t, z.k);
    if a < 1e-6 {
        (a, s) = ns.eval_in_stage(1.0 - 0.5 * dt, z.k);
    }
    z.z.lincomb(1.0 / a, eps, -s / a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{RescaleMode, StageKind, StageSchedule};

    fn setup() -> (NoiseSchedule, Vec<Shape>) {
        let shapes = vec![Shape::new(3, 8, 8), Shape::new(3, 4, 4)];
        let ns = NoiseSchedule::new(
            StageSchedule::new(1, StageKind::Linear),
            &[192, 48],
            &[1.0],
            RescaleMode::VariancePreserved,
        )
        .unwrap();
        (ns, shapes)
    }

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 4,
            ..DenoiserConfig::default()
        }
    }

    fn randomize<T: Real>(net: &mut Denoiser<T>, seed: u64, scale: f64) {
        let mut r = rng::seeded(seed);
        for p in net.params_mut() {
            *p = T::c(scale * rng::standard_normal(&mut r));
        }
    }

    #[test]
    fn default_network_fits_desk_budget() {
        let shapes = [Shape::new(3, 32, 32), Shape::new(3, 16, 16), Shape::new(3, 8, 8)];
        let net = Denoiser::<f32>::new(DenoiserConfig::default(), &shapes, 0).unwrap();
        assert!(net.num_params() <= 100_000, "{}", net.num_params());
        assert_eq!(net.adapter_shapes().len(), 3);
        let blur = Denoiser::<f32>::new(DenoiserConfig::default(), &[shapes[0]; 4], 0).unwrap();
        assert_eq!(blur.adapter_shapes().len(), 1);
    }

    #[test]
    fn output_shapes_and_determinism() {
        let (ns, shapes) = setup();
        let mut net = Denoiser::<f32>::new(small(), &shapes, 1).unwrap();
        randomize(&mut net, 2, 0.3);
        let mut r = rng::seeded(3);
        for (k, &shape) in shapes.iter().enumerate() {
            let z = LatentState {
                z: rng::standard_normal_tensor(&mut r, shape),
                t: 0.3 + 0.5 * k as f64,
                k,
            };
            let a = net.predict(&ns, &z).unwrap();
            let b = net.predict(&ns, &z).unwrap();
            assert_eq!(a.eps.shape(), shape);
            assert_eq!(a.delta.shape(), shape);
            assert_eq!(a, b);
        }
        let bad = LatentState {
            z: Tensor::zeros(shapes[0]),
            t: 0.1,
            k: 5,
        };
        assert!(matches!(net.predict(&ns, &bad), Err(Error::UnregisteredStage { stage: 5 })));
    }

    #[test]
    fn zero_output_adapter_predicts_zero() {
        let (ns, shapes) = setup();
        let cfg = DenoiserConfig {
            parameterization: Parameterization::Epsilon,
            ..small()
        };
        let net = Denoiser::<f32>::new(cfg, &shapes, 4).unwrap();
        let mut r = rng::seeded(5);
        let z = LatentState {
            z: rng::standard_normal_tensor(&mut r, shapes[0]),
            t: 0.25,
            k: 0,
        };
        let out = net.predict(&ns, &z).unwrap();
        assert!(out.eps.data().iter().all(|&v| v == 0.0));
        assert!(out.delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_matches_single() {
        let (ns, shapes) = setup();
        let mut net = Denoiser::<f32>::new(small(), &shapes, 6).unwrap();
        randomize(&mut net, 7, 0.3);
        let mut r = rng::seeded(8);
        let zs: Vec<Tensor> = (0..3).map(|_| rng::standard_normal_tensor(&mut r, shapes[0])).collect();
        let times = [0.1, 0.2, 0.45];
        let refs: Vec<&Tensor> = zs.iter().collect();
        let batch = net.predict_batch(&ns, &refs, &times, 0).unwrap();
        for (i, z) in zs.iter().enumerate() {
            let single = net
                .predict(&ns, &LatentState { z: z.clone(), t: times[i], k: 0 })
                .unwrap();
            assert!(single.eps.max_abs_diff(&batch[i].eps).unwrap() < 1e-5);
            assert!(single.delta.max_abs_diff(&batch[i].delta).unwrap() < 1e-5);
        }
    }

    #[test]
    fn stage_adapters_do_not_leak() {
        let (ns, shapes) = setup();
        let mut net = Denoiser::<f32>::new(small(), &shapes, 9).unwrap();
        randomize(&mut net, 10, 0.3);
        let mut r = rng::seeded(11);
        let z = LatentState {
            z: rng::standard_normal_tensor(&mut r, shapes[0]),
            t: 0.2,
            k: 0,
        };
        let before = net.predict(&ns, &z).unwrap();
        for name in ["adapter1.in.weight", "adapter1.out.weight", "adapter1.out.bias"] {
            let range = net.layout().get(name).unwrap().range();
            for p in &mut net.params_mut()[range] {
                *p += 1.0;
            }
        }
        assert_eq!(net.predict(&ns, &z).unwrap(), before);
    }

    #[test]
    fn eps_and_x_are_consistent() {
        let (ns, shapes) = setup();
        for param in [Parameterization::Epsilon, Parameterization::Velocity] {
            let cfg = DenoiserConfig {
                parameterization: param,
                ..small()
            };
            let mut net = Denoiser::<f32>::new(cfg, &shapes, 12).unwrap();
            randomize(&mut net, 13, 0.3);
            let mut r = rng::seeded(14);
            let z = LatentState {
                z: rng::standard_normal_tensor(&mut r, shapes[1]),
                t: 0.7,
                k: 1,
            };
            let out = net.predict(&ns, &z).unwrap();
            let x = x_from_eps(&ns, &z, &out.eps, 0.004).unwrap();
            assert!(x.max_abs_diff(&out.x).unwrap() < 1e-4);
        }
    }

    #[test]
    fn x_from_eps_inverts_the_marginal() {
        let (ns, shapes) = setup();
        let mut r = rng::seeded(15);
        let x = rng::standard_normal_tensor(&mut r, shapes[0]);
        let eps = rng::standard_normal_tensor(&mut r, shapes[0]);
        for t in [0.0, 0.2, 0.4] {
            let (a, s) = ns.eval(t).unwrap();
            let z = LatentState { z: x.lincomb(a, &eps, s).unwrap(), t, k: 0 };
            let back = x_from_eps(&ns, &z, &eps, 0.004).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() < 1e-5);
            let round = back.lincomb(a, &eps, s).unwrap();
            assert!(round.max_abs_diff(&z.z).unwrap() < 1e-6);
        }
        let z = LatentState { z: x.clone(), t: 0.0, k: 0 };
        assert_eq!(x_from_eps(&ns, &z, &eps, 0.004).unwrap(), x);
    }

    /// Central differences of a random linear functional of all outputs.
    #[test]
    fn backward_matches_finite_differences() {
        let (ns, shapes) = setup();
        for param in [Parameterization::Epsilon, Parameterization::Velocity] {
            let cfg = DenoiserConfig {
                parameterization: param,
                ..small()
            };
            let mut net = Denoiser::<f64>::new(cfg, &shapes, 16).unwrap();
            randomize(&mut net, 17, 0.4);
            let mut r = rng::seeded(18);
            let k = 1;
            let n = 2;
            let numel = shapes[k].numel();
            let z: Vec<f64> = (0..n * numel).map(|_| rng::standard_normal(&mut r)).collect();
            let times = [0.55, 0.8];
            let wts: Vec<f64> = (0..3 * n * numel).map(|_| rng::standard_normal(&mut r)).collect();
            let objective = |net: &Denoiser<f64>, z: &[f64]| -> f64 {
                let o = net.forward(&ns, z, &times, k).unwrap();
                let m = n * numel;
                (0..m)
                    .map(|i| wts[i] * o.eps[i] + wts[m + i] * o.delta[i] + wts[2 * m + i] * o.x[i])
                    .sum()
            };
            let mut grads = vec![0.0; net.num_params()];
            let (_, gz) = net
                .forward_backward(
                    &ns,
                    &z,
                    &times,
                    k,
                    |_| {
                        let m = n * numel;
                        (wts[..m].to_vec(), wts[m..2 * m].to_vec(), wts[2 * m..].to_vec())
                    },
                    &mut grads,
                )
                .unwrap();
            let h = 1e-6;
            let adapter0 = net.layout().get("adapter0.in.weight").unwrap().range();
            for i in (0..net.num_params()).step_by(7) {
                if adapter0.contains(&i) {
                    continue;
                }
                let mut plus = net.clone();
                plus.params_mut()[i] += h;
                let mut minus = net.clone();
                minus.params_mut()[i] -= h;
                let fd = (objective(&plus, &z) - objective(&minus, &z)) / (2.0 * h);
                let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
                assert!(err < 1e-5, "{param:?} param {i}: fd {fd} vs {}", grads[i]);
            }
            for i in (0..z.len()).step_by(5) {
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let fd = (objective(&net, &zp) - objective(&net, &zm)) / (2.0 * h);
                let err = (fd - gz[i]).abs() / fd.abs().max(gz[i].abs()).max(1e-6);
                assert!(err < 1e-5, "input {i}: fd {fd} vs {}", gz[i]);
            }
        }
    }
}
