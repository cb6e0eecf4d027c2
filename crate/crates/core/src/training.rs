//! Losses, ray sampling, Adam and the coarse-to-fine fit loop.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{pose_control_points, RayBatch};
use crate::data::{Burst, DataError};
use crate::diffcore::{DiffError, Grad, Tape, Tensor, Var};
use crate::encoding::EncodingSize;
use crate::layers::{
    composite_op, param_kind, ActiveLevels, LayerConfig, LayerError, MlpShape, ObstructionConfig, ParamKind,
    SceneConfig, SceneModel,
};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("non-finite gradient in '{0}'")]
    NonFiniteGradient(String),
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("empty burst")]
    EmptyBurst,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Occlusion,
    Reflection,
    Segmentation,
    Shadow,
    Dehaze,
    Fusion,
}

impl Preset {
    pub const ALL: [Preset; 6] =
        [Preset::Occlusion, Preset::Reflection, Preset::Segmentation, Preset::Shadow, Preset::Dehaze, Preset::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Occlusion => "occlusion",
            Preset::Reflection => "reflection",
            Preset::Segmentation => "segmentation",
            Preset::Shadow => "shadow",
            Preset::Dehaze => "dehaze",
            Preset::Fusion => "fusion",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = FitError;
    fn from_str(s: &str) -> Result<Self, FitError> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            FitError::Config(format!("unknown preset '{s}', expected one of: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Mean of `|α|`.
    Magnitude,
    /// Mean of `α(1 − α)`.
    Segmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientLossConfig {
    pub enabled: bool,
    pub weight: f64,
    /// Partner radius in pixels at the first step.
    pub radius_start_px: f64,
    pub radius_end_px: f64,
    /// Fraction of the steps over which the radius decays linearly.
    pub decay_fraction: f64,
}

impl Default for GradientLossConfig {
    fn default() -> Self {
        Self { enabled: false, weight: 1.0, radius_start_px: 2.0, radius_end_px: 0.25, decay_fraction: 0.4 }
    }
}

impl GradientLossConfig {
    pub fn radius_px(&self, step: usize, steps: usize) -> f64 {
        let span = self.decay_fraction * steps as f64;
        let p = if span > 0.0 { (step as f64 / span).min(1.0) } else { 1.0 };
        self.radius_start_px + (self.radius_end_px - self.radius_start_px) * p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub preset: Preset,
    pub steps: usize,
    pub rays_per_step: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Multiplier on the learning rate of pose parameters.
    pub pose_lr_scale: f64,
    pub eta_alpha: f64,
    pub alpha_mode: AlphaMode,
    pub eps: f64,
    pub seed: u64,
    pub eta_r: f64,
    pub tau: f64,
    pub transmission: LayerConfig,
    pub obstruction: Option<ObstructionConfig>,
    pub mlp: MlpShape,
    pub alpha_bias: f64,
    pub coarse_to_fine: bool,
    pub gradient_loss: GradientLossConfig,
    pub deterministic: bool,
    /// Rays per tape; the batch is split into chunks of this size.
    pub chunk_size: usize,
    pub log_every: usize,
}

fn layer(flow: EncodingSize, flow_points: usize, image: EncodingSize, depth: f64) -> LayerConfig {
    LayerConfig { image, flow, flow_points, depth }
}

impl FitConfig {
    /// Per-application defaults.
    pub fn preset(preset: Preset) -> Self {
        use EncodingSize::*;
        let tr = |flow, pts| layer(flow, pts, Large, 1.0);
        let ob = |flow, pts, rgb, alpha, depth| Some(ObstructionConfig { layer: layer(flow, pts, rgb, depth), alpha });
        let (transmission, obstruction, eta_alpha, alpha_mode, tau) = match preset {
            Preset::Occlusion => (tr(Tiny, 11), ob(Tiny, 11, Medium, Medium, 0.5), 0.02, AlphaMode::Magnitude, 10.0),
            Preset::Reflection => (tr(Tiny, 11), ob(Tiny, 11, Tiny, Large, 2.5), 0.0, AlphaMode::Magnitude, 1.0),
            Preset::Segmentation => {
                (tr(Small, 15), ob(Small, 15, Large, Medium, 2.0), 0.005, AlphaMode::Segmentation, 10.0)
            }
            Preset::Shadow => (tr(Tiny, 11), ob(Tiny, 11, Tiny, Medium, 2.0), 0.0, AlphaMode::Magnitude, 1.0),
            Preset::Dehaze => (tr(Tiny, 11), ob(Tiny, 11, Tiny, Small, 0.5), -0.01, AlphaMode::Magnitude, 1.0),
            Preset::Fusion => (tr(Small, 31), None, 0.0, AlphaMode::Magnitude, 1.0),
        };
        Self {
            preset,
            steps: 6000,
            rays_per_step: 1 << 18,
            lr_initial: 3e-3,
            lr_final: 3e-4,
            pose_lr_scale: 0.1,
            eta_alpha,
            alpha_mode,
            eps: 1e-3,
            seed: 0,
            eta_r: 0.01,
            tau,
            transmission,
            obstruction,
            mlp: MlpShape::default(),
            alpha_bias: -2.0,
            coarse_to_fine: true,
            gradient_loss: GradientLossConfig::default(),
            deterministic: false,
            chunk_size: 2048,
            log_every: 50,
        }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: String| Err(FitError::Config(m));
        if self.steps < 1 {
            return bad("steps must be >= 1".into());
        }
        if self.rays_per_step < 1 || self.chunk_size < 1 {
            return bad("rays per step and chunk size must be >= 1".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0 && self.pose_lr_scale >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !self.eta_alpha.is_finite() {
            return bad("eta_alpha must be finite".into());
        }
        if self.preset == Preset::Fusion && self.obstruction.is_some() {
            return bad("fusion preset is single-layer".into());
        }
        if self.log_every < 1 {
            return bad("log interval must be >= 1".into());
        }
        Ok(())
    }

    /// Cosine decay from `lr_initial` to `lr_final`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let p = if self.steps > 1 { step as f64 / (self.steps - 1) as f64 } else { 1.0 };
        self.lr_final + 0.5 * (self.lr_initial - self.lr_final) * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn scene_config(&self, burst: &Burst) -> SceneConfig {
        SceneConfig {
            intrinsics: burst.intrinsics,
            transmission: self.transmission,
            obstruction: self.obstruction.clone(),
            mlp: self.mlp,
            tau: self.tau,
            eta_r: self.eta_r,
            pose_points: pose_control_points(burst.frame_count()),
            alpha_bias: self.alpha_bias,
            device_times: burst.timestamps.clone(),
            device_rotations: burst.device_rotations.clone(),
        }
    }
}

/// Mean over batch and channels of `|(c − ĉ)/(c + ε)|`.
pub fn photometric_loss(observed: &[f64], predicted: &[f64], eps: f64) -> f64 {
    let s: f64 = observed.iter().zip(predicted).map(|(&c, &p)| ((c - p) / (c + eps)).abs()).sum();
    s / observed.len() as f64
}

pub fn alpha_regularizer(alpha: &[f64], mode: AlphaMode) -> f64 {
    let s: f64 = match mode {
        AlphaMode::Magnitude => alpha.iter().map(|a| a.abs()).sum(),
        AlphaMode::Segmentation => alpha.iter().map(|a| a * (1.0 - a)).sum(),
    };
    s / alpha.len() as f64
}

/// Sum of `|(ĉ − c)/(sg(c) + ε)|` scaled by `norm`. The observed colors are
/// constants, so the denominator carries no gradient.
pub fn photometric_loss_op<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    predicted: Var,
    observed: &[T],
    eps: f64,
    norm: f64,
) -> Result<Var, DiffError> {
    let shape = tape.value(predicted).shape().to_vec();
    let c = tape.constant(Tensor::new(shape.clone(), observed.to_vec())?);
    let inv: Vec<T> = observed.iter().map(|&c| T::one() / (c + T::lit(eps))).collect();
    let inv = tape.constant(Tensor::new(shape, inv)?);
    let d = tape.sub(c, predicted)?;
    let d = tape.mul(d, inv)?;
    let d = tape.abs(d);
    let s = tape.sum(d);
    Ok(tape.scale(s, T::lit(norm)))
}

pub fn alpha_regularizer_op<'a, T: Real>(tape: &mut Tape<'a, T>, alpha: Var, mode: AlphaMode, norm: f64) -> Var {
    let r = match mode {
        AlphaMode::Magnitude => tape.abs(alpha),
        AlphaMode::Segmentation => {
            let neg = tape.scale(alpha, -T::one());
            let one_minus = tape.offset(neg, T::one());
            tape.mul(alpha, one_minus).expect("same shape")
        }
    };
    let s = tape.sum(r);
    tape.scale(s, T::lit(norm))
}

/// Sum of `|(Δc − Δĉ)/(sg(|Δc|) + ε)|²` scaled by `norm`, where Δ is the
/// difference between a ray and its perturbed partner.
pub fn gradient_loss_op<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    predicted: Var,
    predicted_partner: Var,
    observed: &[T],
    observed_partner: &[T],
    eps: f64,
    norm: f64,
) -> Result<Var, DiffError> {
    let shape = tape.value(predicted).shape().to_vec();
    let dc: Vec<T> = observed.iter().zip(observed_partner).map(|(&a, &b)| a - b).collect();
    let inv: Vec<T> = dc.iter().map(|&d| T::one() / (d.abs() + T::lit(eps))).collect();
    let dc = tape.constant(Tensor::new(shape.clone(), dc)?);
    let inv = tape.constant(Tensor::new(shape, inv)?);
    let dp = tape.sub(predicted, predicted_partner)?;
    let r = tape.sub(dc, dp)?;
    let r = tape.mul(r, inv)?;
    let r = tape.mul(r, r)?;
    let s = tape.sum(r);
    Ok(tape.scale(s, T::lit(norm)))
}

/// Plain-value gradient loss, for inspection and tests.
pub fn gradient_loss(
    observed: &[f64],
    observed_partner: &[f64],
    predicted: &[f64],
    predicted_partner: &[f64],
    eps: f64,
) -> f64 {
    let n = observed.len();
    (0..n)
        .map(|i| {
            let dc = observed[i] - observed_partner[i];
            let dp = predicted[i] - predicted_partner[i];
            ((dc - dp) / (dc.abs() + eps)).powi(2)
        })
        .sum::<f64>()
        / n as f64
}

/// A batch of sampled rays with observed colors.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub frames: Vec<usize>,
    /// `(u, v, t)`.
    pub pixels: Vec<(f64, f64, f64)>,
    /// Interleaved RGB.
    pub colors: Vec<f32>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Uniform frames and uniform continuous positions with bilinear reads.
pub fn sample_batch(burst: &Burst, n: usize, rng: &mut impl Rng) -> Result<RaySamples, FitError> {
    if burst.frames.is_empty() {
        return Err(FitError::EmptyBurst);
    }
    let mut out = RaySamples { frames: Vec::with_capacity(n), pixels: Vec::with_capacity(n), colors: vec![0.0; n * 3] };
    for i in 0..n {
        let f = rng.gen_range(0..burst.frames.len());
        let (u, v): (f64, f64) = (rng.gen(), rng.gen());
        burst.frames[f].bilinear(u, v, &mut out.colors[i * 3..i * 3 + 3]);
        out.frames.push(f);
        out.pixels.push((u, v, burst.timestamps[f]));
    }
    Ok(out)
}

/// Partner rays at `(u + r_u·cos φ, v + r_v·sin φ)` with uniform φ.
pub fn perturb_batch(burst: &Burst, batch: &RaySamples, radius_px: f64, rng: &mut impl Rng) -> RaySamples {
    let (ru, rv) = (radius_px / burst.width() as f64, radius_px / burst.height() as f64);
    let mut out = RaySamples {
        frames: batch.frames.clone(),
        pixels: Vec::with_capacity(batch.len()),
        colors: vec![0.0; batch.len() * 3],
    };
    for (i, (&f, &(u, v, t))) in batch.frames.iter().zip(&batch.pixels).enumerate() {
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (pu, pv) = (u + ru * phi.cos(), v + rv * phi.sin());
        burst.frames[f].bilinear(pu, pv, &mut out.colors[i * 3..i * 3 + 3]);
        out.pixels.push((pu, pv, t));
    }
    out
}

/// Gradient for one parameter tensor, coalesced.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad<T> {
    None,
    Dense(Vec<T>),
    /// Unique rows with their summed gradients.
    Rows { width: usize, rows: Vec<u32>, values: Vec<T> },
}

/// Adam moments for each parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lens: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
            step: 0,
            first: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One bias-corrected Adam step. Row gradients update only the listed rows
/// and leave the moments of other rows untouched. Fails before modifying
/// anything if a gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &[ParamGrad<T>],
    state: &mut AdamState<T>,
    lrs: &[f64],
) -> Result<(), FitError> {
    for ((name, p), g) in params.iter().zip(grads) {
        let ok = match g {
            ParamGrad::None => true,
            ParamGrad::Dense(v) => v.len() == p.len() && v.iter().all(|x| x.is_finite()),
            ParamGrad::Rows { values, .. } => values.iter().all(|x| x.is_finite()),
        };
        if !ok {
            return Err(FitError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let eps = T::lit(state.eps);
    for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = T::lit(lrs[k]);
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        let data = p.data_mut();
        let one = T::one();
        let update = |p: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        match g {
            ParamGrad::None => {}
            ParamGrad::Dense(gv) => {
                for (((p, m), v), &g) in data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(gv) {
                    update(p, m, v, g);
                }
            }
            ParamGrad::Rows { width, rows, values } => {
                for (j, &r) in rows.iter().enumerate() {
                    for c in 0..*width {
                        let i = r as usize * width + c;
                        update(&mut data[i], &mut m[i], &mut v[i], values[j * width + c]);
                    }
                }
            }
        }
    }
    Ok(())
}

/// One entry of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub photometric: f64,
    pub alpha_reg: f64,
}

pub fn loss_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,photometric,alpha_reg\n");
    for r in trace {
        writeln!(s, "{},{:e},{:e},{:e}", r.step, r.total, r.photometric, r.alpha_reg).expect("string write");
    }
    s
}

/// Per-step information passed to an observer.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub step: usize,
    pub active: ActiveLevels,
    pub learning_rate: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult<T: Real> {
    pub model: SceneModel<T>,
    pub trace: Vec<LossRecord>,
    /// Accumulated squared gradient norm per named parameter.
    pub grad_norms: Vec<(String, f64)>,
}

struct ChunkResult<T> {
    photometric: f64,
    alpha_reg: f64,
    grads: Vec<Option<Grad<T>>>,
}

fn chunk_step<T: Real>(
    scene: &SceneModel<T>,
    config: &FitConfig,
    batch: &RaySamples,
    partner: Option<&RaySamples>,
    range: std::ops::Range<usize>,
    active: &ActiveLevels,
    total_rays: usize,
) -> Result<ChunkResult<T>, FitError> {
    let mut tape = Tape::new();
    let vars = scene.bind(&mut tape);
    let pixels = &batch.pixels[range.clone()];
    let observed: Vec<T> = batch.colors[range.start * 3..range.end * 3].iter().map(|&c| T::lit(c as f64)).collect();
    let rays = RayBatch::new(pixels, scene.intrinsics(), &scene.pose);
    let out = composite_op(&mut tape, scene, &vars, &rays, active, None)?;
    let norm = 1.0 / (3 * total_rays) as f64;
    let lp = photometric_loss_op(&mut tape, out.color, &observed, config.eps, norm)?;
    let mut total = lp;
    let mut ra_value = 0.0;
    if let Some(alpha) = out.alpha {
        let ra = alpha_regularizer_op(&mut tape, alpha, config.alpha_mode, 1.0 / total_rays as f64);
        ra_value = tape.value(ra).item().as_f64();
        if config.eta_alpha != 0.0 {
            let weighted = tape.scale(ra, T::lit(config.eta_alpha));
            total = tape.add(total, weighted)?;
        }
    }
    if let Some(partner) = partner {
        let p_rays = RayBatch::new(&partner.pixels[range.clone()], scene.intrinsics(), &scene.pose);
        let p_out = composite_op(&mut tape, scene, &vars, &p_rays, active, None)?;
        let p_obs: Vec<T> = partner.colors[range.start * 3..range.end * 3].iter().map(|&c| T::lit(c as f64)).collect();
        let gl = gradient_loss_op(&mut tape, out.color, p_out.color, &observed, &p_obs, config.eps, norm)?;
        let gl = tape.scale(gl, T::lit(config.gradient_loss.weight));
        total = tape.add(total, gl)?;
    }
    let photometric = tape.value(lp).item().as_f64();
    let mut grads = tape.backward(total)?;
    Ok(ChunkResult { photometric, alpha_reg: ra_value, grads: vars.params.iter().map(|&v| grads.take(v)).collect() })
}

/// Fits a scene model to `burst`.
pub fn fit(burst: &Burst, config: &FitConfig) -> Result<FitResult<f32>, FitError> {
    fit_with_observer(burst, config, |_| {})
}

pub fn fit_with_observer(
    burst: &Burst,
    config: &FitConfig,
    mut observer: impl FnMut(&StepInfo),
) -> Result<FitResult<f32>, FitError> {
    config.validate()?;
    if burst.frames.is_empty() {
        return Err(FitError::EmptyBurst);
    }
    burst.validate()?;
    let mut scene = SceneModel::<f32>::new(config.scene_config(burst), config.seed)?;
    let names: Vec<String> = scene.named_tensors().into_iter().map(|(n, _)| n).collect();
    let kinds: Vec<ParamKind> = names.iter().map(|n| param_kind(n)).collect();
    let lens: Vec<usize> = scene.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::<f32>::new(&lens);
    let mut buffers: Vec<Vec<f32>> = lens.iter().map(|&n| vec![0.0; n]).collect();
    let mut grad_norms = vec![0.0f64; names.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    let n = config.rays_per_step;
    let ranges: Vec<std::ops::Range<usize>> =
        (0..n).step_by(config.chunk_size).map(|s| s..(s + config.chunk_size).min(n)).collect();

    for step in 0..config.steps {
        let active = if config.coarse_to_fine { scene.levels_at(step + 1, config.steps) } else { scene.full_levels() };
        let lr = config.learning_rate(step);
        let batch = sample_batch(burst, n, &mut rng)?;
        let partner = config.gradient_loss.enabled.then(|| {
            let r = config.gradient_loss.radius_px(step, config.steps);
            perturb_batch(burst, &batch, r, &mut rng)
        });
        let run = |r: &std::ops::Range<usize>| chunk_step(&scene, config, &batch, partner.as_ref(), r.clone(), &active, n);
        let results: Vec<ChunkResult<f32>> = if config.deterministic {
            ranges.iter().map(run).collect::<Result<_, _>>()?
        } else {
            ranges.par_iter().map(run).collect::<Result<_, _>>()?
        };
        let photometric: f64 = results.iter().map(|r| r.photometric).sum();
        let alpha_reg: f64 = results.iter().map(|r| r.alpha_reg).sum();
        let total = photometric + config.eta_alpha * alpha_reg;
        if !total.is_finite() {
            return Err(FitError::NonFinite { step });
        }
        observer(&StepInfo { step, active, learning_rate: lr, loss: total });
        if step % config.log_every == 0 || step + 1 == config.steps {
            trace.push(LossRecord { step, total, photometric, alpha_reg });
        }

        // chunk order is fixed, so the merged sums do not depend on scheduling
        buffers.iter_mut().for_each(|b| b.iter_mut().for_each(|x| *x = 0.0));
        for r in results {
            for (k, g) in r.grads.into_iter().enumerate() {
                match g {
                    Some(Grad::Dense(d)) => buffers[k].iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    Some(Grad::Rows { width, rows, values }) => {
                        for (j, &row) in rows.iter().enumerate() {
                            let dst = &mut buffers[k][row as usize * width..(row as usize + 1) * width];
                            dst.iter_mut().zip(&values[j * width..(j + 1) * width]).for_each(|(a, b)| *a += b);
                        }
                    }
                    None => {}
                }
            }
        }
        for (k, b) in buffers.iter().enumerate() {
            grad_norms[k] += b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
        }
        let grads: Vec<ParamGrad<f32>> = buffers.drain(..).map(ParamGrad::Dense).collect();
        let lrs: Vec<f64> =
            kinds.iter().map(|k| if *k == ParamKind::Pose { lr * config.pose_lr_scale } else { lr }).collect();
        let mut params = scene.named_tensors_mut();
        adam_step(&mut params, &grads, &mut adam, &lrs)?;
        buffers.extend(grads.into_iter().map(|g| match g {
            ParamGrad::Dense(v) => v,
            _ => unreachable!("fit builds dense gradients"),
        }));
    }
    Ok(FitResult { model: scene, trace, grad_norms: names.into_iter().zip(grad_norms).collect() })
}

/// Photometric loss over every pixel center of every frame.
pub fn evaluate_burst_loss<T: Real>(scene: &SceneModel<T>, burst: &Burst, eps: f64) -> Result<f64, FitError> {
    let (w, h) = (burst.width(), burst.height());
    let active = scene.full_levels();
    let per_frame = burst
        .frames
        .par_iter()
        .zip(&burst.timestamps)
        .map(|(frame, &t)| -> Result<f64, FitError> {
            let mut acc = 0.0;
            for y0 in (0..h).step_by(16) {
                let rows = y0..(y0 + 16).min(h);
                let mut pixels = Vec::new();
                for y in rows.clone() {
                    for x in 0..w {
                        pixels.push(((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64, t));
                    }
                }
                let mut tape = Tape::new();
                let vars = scene.bind_frozen(&mut tape);
                let rays = RayBatch::new(&pixels, scene.intrinsics(), &scene.pose);
                let out = composite_op(&mut tape, scene, &vars, &rays, &active, None)?;
                let pred = tape.value(out.color).data();
                let obs = &frame.data()[rows.start * w * 3..rows.end * w * 3];
                acc += obs
                    .iter()
                    .zip(pred)
                    .map(|(&c, &p)| ((c as f64 - p.as_f64()) / (c as f64 + eps)).abs())
                    .sum::<f64>();
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_frame.iter().sum::<f64>() / (burst.frame_count() * w * h * 3) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::data::{identity_rotations, uniform_timestamps, Image};
    use crate::diffcore::evaluate_with_gradients;

    #[test]
    fn photometric_examples() {
        assert_eq!(photometric_loss(&[0.3, 0.7], &[0.3, 0.7], 1e-3), 0.0);
        let l = photometric_loss(&[1.0], &[0.5], 1e-3);
        assert!((l - 0.5 / 1.001).abs() < 1e-15);
        assert!((l - 0.49950).abs() < 1e-5);
        let (v, g) = evaluate_with_gradients(
            |t, v| photometric_loss_op(t, v[0], &[1.0], 1e-3, 1.0),
            &[Tensor::new(vec![1, 1], vec![0.5]).unwrap().with_grad()],
        )
        .unwrap();
        assert!((v.item() - 0.5f64 / 1.001).abs() < 1e-15);
        let g: f64 = g[0].as_ref().unwrap().item();
        assert!((g + 1.0 / 1.001).abs() < 1e-12);
        let h = 1e-6;
        let fd = (photometric_loss(&[1.0], &[0.5 + h], 1e-3) - photometric_loss(&[1.0], &[0.5 - h], 1e-3)) / (2.0 * h);
        assert!((fd - g).abs() < 1e-8);
    }

    #[test]
    fn alpha_regularizer_examples() {
        for mode in [AlphaMode::Magnitude, AlphaMode::Segmentation] {
            assert_eq!(alpha_regularizer(&[0.0; 4], mode), 0.0);
        }
        assert_eq!(alpha_regularizer(&[0.5; 4], AlphaMode::Segmentation), 0.25);
        assert_eq!(alpha_regularizer(&[0.5; 4], AlphaMode::Magnitude), 0.5);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![4, 1], vec![0.1, 0.5, 0.9, 0.3]).unwrap());
        for mode in [AlphaMode::Magnitude, AlphaMode::Segmentation] {
            let r = alpha_regularizer_op(&mut tape, a, mode, 0.25);
            let want = alpha_regularizer(&[0.1, 0.5, 0.9, 0.3], mode);
            assert!((tape.value(r).item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_loss_examples() {
        let c = [0.2, 0.4, 0.6];
        let cp = [0.3, 0.1, 0.6];
        assert_eq!(gradient_loss(&c, &cp, &c, &cp, 1e-3), 0.0);
        // zero radius: partner equals the ray
        assert_eq!(gradient_loss(&c, &c, &[0.1, 0.9, 0.5], &[0.1, 0.9, 0.5], 1e-3), 0.0);
        // constant observations: only the predicted difference remains
        let k = [0.5; 3];
        let (p, pp) = ([0.5, 0.51, 0.49], [0.5, 0.5, 0.5]);
        let want = (0.0 + (0.01f64 / 1e-3).powi(2) + (0.01f64 / 1e-3).powi(2)) / 3.0;
        assert!((gradient_loss(&k, &k, &p, &pp, 1e-3) - want).abs() < 1e-6 * want);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![1, 3], p.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 3], pp.to_vec()).unwrap());
        let l = gradient_loss_op(&mut tape, a, b, &k, &k, 1e-3, 1.0 / 3.0).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-6 * want);
    }

    fn tiny_burst(frames: usize, w: usize, h: usize) -> Burst {
        Burst {
            frames: (0..frames)
                .map(|f| Image::from_fn(w, h, 3, |x, y, c| ((x * 3 + y * 5 + c + f) % 17) as f32 / 17.0))
                .collect(),
            timestamps: uniform_timestamps(frames),
            intrinsics: Intrinsics::identity(),
            device_rotations: identity_rotations(frames),
            ground_truth: None,
        }
    }

    #[test]
    fn sampling_is_uniform_over_frames() {
        let burst = tiny_burst(42, 8, 6);
        let k = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = sample_batch(&burst, 42 * k, &mut rng).unwrap();
        let mut counts = [0usize; 42];
        b.frames.iter().for_each(|&f| counts[f] += 1);
        // multinomial chi-square with 41 dof; 99.9th percentile is ~74.7
        let chi: f64 = counts.iter().map(|&c| (c as f64 - k as f64).powi(2) / k as f64).sum();
        assert!(chi < 74.7, "{chi}");
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(sample_batch(&burst, 42 * k, &mut rng2).unwrap(), b);
        for (i, (&f, &(u, v, t))) in b.frames.iter().zip(&b.pixels).enumerate().take(50) {
            assert_eq!(t, burst.timestamps[f]);
            let mut c = [0.0f32; 3];
            burst.frames[f].bilinear(u, v, &mut c);
            assert_eq!(&b.colors[i * 3..i * 3 + 3], &c);
        }
        let empty = Burst { frames: vec![], ..burst };
        assert!(matches!(sample_batch(&empty, 3, &mut rng), Err(FitError::EmptyBurst)));
    }

    #[test]
    fn adam_examples() {
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let orig = p.clone();
        let mut st = AdamState::<f64>::new(&[3]);
        adam_step(&mut [("p".into(), &mut p)], &[ParamGrad::Dense(vec![0.0; 3])], &mut st, &[0.1]).unwrap();
        assert_eq!(p, orig);

        let mut p = orig.clone();
        let mut st = AdamState::<f64>::new(&[3]);
        let g = vec![0.3, -4.0, 1e-3];
        adam_step(&mut [("p".into(), &mut p)], &[ParamGrad::Dense(g.clone())], &mut st, &[0.01]).unwrap();
        for i in 0..3 {
            // one step: m̂ = g, v̂ = g², update = lr·g/(|g| + eps)
            let want = orig.data()[i] - 0.01 * g[i] / (g[i].abs() + 1e-15);
            assert!((p.data()[i] - want).abs() < 1e-12);
        }
        let before = p.data().to_vec();
        adam_step(&mut [("p".into(), &mut p)], &[ParamGrad::Dense(g.clone())], &mut st, &[0.01]).unwrap();
        for i in 0..3 {
            let moved = p.data()[i] - before[i];
            assert!(moved * g[i] < 0.0);
        }

        let mut p = orig.clone();
        let mut st = AdamState::<f64>::new(&[3]);
        let err = adam_step(&mut [("w".into(), &mut p)], &[ParamGrad::Dense(vec![f64::NAN, 0.0, 0.0])], &mut st, &[0.1]);
        assert!(matches!(err, Err(FitError::NonFiniteGradient(ref n)) if n == "w"));
        assert_eq!(p, orig);
    }

    #[test]
    fn sparse_rows_touch_only_listed_rows() {
        let mut p = Tensor::new(vec![3, 2], vec![1.0f64; 6]).unwrap();
        let mut st = AdamState::<f64>::new(&[6]);
        let g = ParamGrad::Rows { width: 2, rows: vec![1], values: vec![0.5, -0.5] };
        adam_step(&mut [("t".into(), &mut p)], &[g], &mut st, &[0.1]).unwrap();
        assert_eq!(&p.data()[0..2], &[1.0, 1.0]);
        assert_eq!(&p.data()[4..6], &[1.0, 1.0]);
        assert!((p.data()[2] - 0.9).abs() < 1e-12 && (p.data()[3] - 1.1).abs() < 1e-12);
        assert_eq!(st.first[0][0], 0.0);
    }

    #[test]
    fn preset_table() {
        let occ = FitConfig::preset(Preset::Occlusion);
        assert_eq!(occ.transmission.depth, 1.0);
        assert_eq!(occ.obstruction.as_ref().unwrap().layer.depth, 0.5);
        assert_eq!(occ.eta_alpha, 0.02);
        assert_eq!(occ.transmission.flow_points, 11);
        assert_eq!(occ.transmission.image, EncodingSize::Large);
        assert_eq!(occ.obstruction.as_ref().unwrap().layer.image, EncodingSize::Medium);
        let refl = FitConfig::preset(Preset::Reflection);
        assert_eq!(refl.obstruction.as_ref().unwrap().layer.depth, 2.5);
        assert_eq!(refl.eta_alpha, 0.0);
        assert_eq!(refl.obstruction.as_ref().unwrap().alpha, EncodingSize::Large);
        let seg = FitConfig::preset(Preset::Segmentation);
        assert_eq!((seg.eta_alpha, seg.alpha_mode), (0.005, AlphaMode::Segmentation));
        assert_eq!(seg.transmission.flow, EncodingSize::Small);
        assert_eq!(seg.transmission.flow_points, 15);
        assert_eq!(FitConfig::preset(Preset::Dehaze).eta_alpha, -0.01);
        assert_eq!(FitConfig::preset(Preset::Shadow).obstruction.unwrap().layer.depth, 2.0);
        let fusion = FitConfig::preset(Preset::Fusion);
        assert!(fusion.obstruction.is_none());
        assert_eq!(fusion.transmission.flow_points, 31);
        assert_eq!((fusion.steps, fusion.rays_per_step), (6000, 1 << 18));
        assert!("bokeh".parse::<Preset>().unwrap_err().to_string().contains("occlusion, reflection"));
    }

    #[test]
    fn learning_rate_schedule() {
        let mut c = FitConfig::preset(Preset::Occlusion);
        c.steps = 101;
        assert!((c.learning_rate(0) - 3e-3).abs() < 1e-15);
        assert!((c.learning_rate(100) - 3e-4).abs() < 1e-15);
        assert!((c.learning_rate(50) - 1.65e-3).abs() < 1e-12);
        let g = GradientLossConfig::default();
        assert_eq!(g.radius_px(0, 100), 2.0);
        assert_eq!(g.radius_px(40, 100), 0.25);
        assert_eq!(g.radius_px(90, 100), 0.25);
    }

    fn mini_config() -> FitConfig {
        let mut c = FitConfig::preset(Preset::Occlusion);
        c.transmission.image = EncodingSize::Tiny;
        c.obstruction.as_mut().unwrap().layer.image = EncodingSize::Tiny;
        c.obstruction.as_mut().unwrap().alpha = EncodingSize::Tiny;
        c.transmission.flow_points = 4;
        c.obstruction.as_mut().unwrap().layer.flow_points = 4;
        c.mlp = MlpShape { layers: 2, width: 8 };
        c.steps = 6;
        c.rays_per_step = 96;
        c.chunk_size = 40;
        c.deterministic = true;
        c.log_every = 2;
        c
    }

    #[test]
    fn miniature_fit_exercises_every_parameter() {
        let burst = tiny_burst(4, 10, 8);
        let mut cfg = mini_config();
        cfg.gradient_loss.enabled = true;
        let res = fit(&burst, &cfg).unwrap();
        for (name, norm) in &res.grad_norms {
            assert!(*norm > 0.0, "{name} received no gradient");
        }
        assert_eq!(res.trace.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
    }

    #[test]
    fn deterministic_fits_repeat_bitwise() {
        let burst = tiny_burst(3, 10, 8);
        let cfg = mini_config();
        let a = fit(&burst, &cfg).unwrap();
        let b = fit(&burst, &cfg).unwrap();
        assert_eq!(loss_csv(&a.trace), loss_csv(&b.trace));
        for ((_, x), (_, y)) in a.model.named_tensors().iter().zip(b.model.named_tensors()) {
            assert_eq!(x.data(), y.data());
        }
        let mut par = cfg.clone();
        par.deterministic = false;
        let c = fit(&burst, &par).unwrap();
        assert_eq!(loss_csv(&a.trace), loss_csv(&c.trace));
    }

    #[test]
    fn coarse_to_fine_schedule_is_monotone() {
        let burst = tiny_burst(3, 10, 8);
        let mut cfg = mini_config();
        cfg.steps = 12;
        let mut seen: Vec<ActiveLevels> = Vec::new();
        let res = fit_with_observer(&burst, &cfg, |s| seen.push(s.active)).unwrap();
        let key = |a: &ActiveLevels| [a.transmission_image, a.transmission_flow, a.obstruction_image, a.obstruction_flow, a.alpha];
        for w in seen.windows(2) {
            assert!(key(&w[0]).iter().zip(key(&w[1])).all(|(a, b)| *a <= b));
        }
        assert_eq!(*seen.last().unwrap(), res.model.full_levels());
        assert!(key(&seen[0]).iter().zip(key(&res.model.full_levels())).any(|(a, b)| *a < b));
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let mut burst = tiny_burst(3, 10, 8);
        let mut cfg = mini_config();
        cfg.eps = 1e-3;
        // frames validated on entry; poison the model instead via a huge lr
        cfg.lr_initial = 1e30;
        cfg.lr_final = 1e30;
        burst.frames[0].data_mut()[0] = 0.0;
        match fit(&burst, &cfg) {
            Err(FitError::NonFinite { step }) => assert!(step > 0),
            Err(FitError::NonFiniteGradient(_)) => {}
            other => panic!("expected abort, got {:?}", other.map(|r| r.trace)),
        }
    }

    #[test]
    fn config_errors() {
        let burst = tiny_burst(3, 10, 8);
        let mut cfg = mini_config();
        cfg.steps = 0;
        assert!(matches!(fit(&burst, &cfg), Err(FitError::Config(_))));
        let mut cfg = FitConfig::preset(Preset::Fusion);
        cfg.obstruction = FitConfig::preset(Preset::Occlusion).obstruction;
        assert!(matches!(cfg.validate(), Err(FitError::Config(_))));
    }
}
