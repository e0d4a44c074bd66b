//! Reverse-process sampling with classifier-free keyframe guidance and DCT
//! transition guidance, plus the inpainting and gradient-editing baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::denoiser::{DenoiserModel, KeyframeCondition};
use crate::diffusion::{posterior_mean, q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::motion_data::KeyframeMask;
use crate::rng::{self, SeededRng};
use crate::scalar::Scalar;

/// Orthonormal DCT-II basis over a window and its low-pass projection.
#[derive(Clone, Debug)]
pub struct DctWindow<T> {
    pub l: usize,
    pub m: usize,
    /// `(2l+1) × m`
    pub basis: Matrix<T>,
    /// `(2l+1) × (2l+1)`, `D·Dᵀ`
    pub projection: Matrix<T>,
}

/// First `m` orthonormal DCT-II vectors of length `len`, as columns.
pub fn dct_columns<T: Scalar>(len: usize, m: usize) -> Result<Matrix<T>> {
    if m == 0 || m > len {
        return Err(Error::Config(format!("DCT basis count {m} outside [1, {len}]")));
    }
    let n = len as f64;
    Ok(Matrix::from_fn(len, m, |i, k| {
        let c = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        T::lit(c * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n).cos())
    }))
}

pub fn dct_basis<T: Scalar>(l: usize, m: usize) -> Result<DctWindow<T>> {
    let basis = dct_columns(2 * l + 1, m)?;
    let projection = basis.matmul_t(&basis);
    Ok(DctWindow {
        l,
        m,
        basis,
        projection,
    })
}

/// Window rows `[start, start+len)` around keyframe `i`, clipped to `[0, n)`.
pub fn window_bounds(i: usize, n: usize, l: usize) -> (usize, usize) {
    let start = i.saturating_sub(l);
    let end = (i + l + 1).min(n);
    (start, end - start)
}

/// Per-window smoothing operators for one keyframe layout.
///
/// Windows clipped by the sequence ends use a basis rebuilt for the clipped
/// length with `min(m, len)` vectors.
#[derive(Clone, Debug)]
pub struct TransitionGuide<T> {
    frames: usize,
    keyframe_rows: Vec<bool>,
    windows: Vec<(usize, Matrix<T>)>,
    norm: T,
}

impl<T: Scalar> TransitionGuide<T> {
    pub fn new(mask: &KeyframeMask, l: usize, m: usize) -> Result<Self> {
        if m == 0 || m > 2 * l + 1 {
            return Err(Error::Config(format!("m = {m} outside [1, {}]", 2 * l + 1)));
        }
        let n = mask.frames();
        let k = mask.count();
        if k == 0 {
            return Err(Error::Precondition("transition loss needs at least one keyframe".into()));
        }
        let windows = mask
            .keyframe_indices()
            .iter()
            .map(|&i| {
                let (start, len) = window_bounds(i, n, l);
                let d = dct_columns::<T>(len, m.min(len))?;
                let residual = Matrix::<T>::identity(len).sub(&d.matmul_t(&d));
                Ok((start, residual))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames: n,
            keyframe_rows: mask.row_flags(),
            windows,
            norm: T::one() / T::lit(((2 * l + 1) * k) as f64),
        })
    }

    fn check(&self, x: &Matrix<T>) -> Result<()> {
        if x.rows() != self.frames {
            return Err(Error::Shape(format!(
                "sequence has {} frames, guide built for {}",
                x.rows(),
                self.frames
            )));
        }
        Ok(())
    }

    /// `x` must already carry keyframe values on keyframe rows.
    pub fn loss(&self, x: &Matrix<T>) -> Result<T> {
        self.check(x)?;
        let mut total = T::zero();
        for (start, residual) in &self.windows {
            let g = x.slice_rows(*start, residual.rows());
            total += residual.matmul(&g).frobenius_sq();
        }
        Ok(total * self.norm)
    }

    /// Gradient of [`Self::loss`] with respect to the non-keyframe rows;
    /// keyframe rows are constants and receive zero.
    pub fn grad(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(x)?;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let two = T::lit(2.0) * self.norm;
        for (start, residual) in &self.windows {
            let g = x.slice_rows(*start, residual.rows());
            // (I−P) is symmetric idempotent, so (I−P)ᵀ(I−P)G = (I−P)G.
            let r = residual.matmul(&g);
            for a in 0..r.rows() {
                let row = start + a;
                if self.keyframe_rows[row] {
                    continue;
                }
                for (o, v) in out.row_mut(row).iter_mut().zip(r.row(a)) {
                    *o += two * *v;
                }
            }
        }
        Ok(out)
    }
}

/// Replaces keyframe rows of `x` with the keyframe values.
pub fn assemble<T: Scalar>(x: &Matrix<T>, keyframes: &Matrix<T>, mask: &KeyframeMask) -> Matrix<T> {
    let mut out = x.clone();
    for &i in mask.keyframe_indices() {
        out.row_mut(i).copy_from_slice(keyframes.row(i));
    }
    out
}

/// Transition smoothness loss of an assembled sequence.
pub fn transition_loss<T: Scalar>(x: &Matrix<T>, mask: &KeyframeMask, l: usize, m: usize) -> Result<T> {
    TransitionGuide::new(mask, l, m)?.loss(x)
}

pub fn transition_grad<T: Scalar>(x: &Matrix<T>, mask: &KeyframeMask, l: usize, m: usize) -> Result<Matrix<T>> {
    TransitionGuide::new(mask, l, m)?.grad(x)
}

/// `uncond + s·(cond − uncond)`.
pub fn cfg_combine<T: Scalar>(cond: &Matrix<T>, uncond: &Matrix<T>, s: f64) -> Result<Matrix<T>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", cond.shape(), uncond.shape())));
    }
    if s == 1.0 {
        return Ok(cond.clone());
    }
    if s == 0.0 {
        return Ok(uncond.clone());
    }
    let s = T::lit(s);
    Ok(cond.zip_map(uncond, |c, u| u + s * (c - u)))
}

/// Sampling method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "diffkfc")]
    DiffKfc,
    #[serde(rename = "inpaint")]
    Inpaint,
    #[serde(rename = "grad")]
    Grad,
    #[serde(rename = "text-only")]
    TextOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::DiffKfc, Strategy::Inpaint, Strategy::Grad, Strategy::TextOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::DiffKfc => "diffkfc",
            Strategy::Inpaint => "inpaint",
            Strategy::Grad => "grad",
            Strategy::TextOnly => "text-only",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}' (expected diffkfc, inpaint, grad or text-only)")))
    }
}

/// Guidance settings of one sampling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub r: f64,
    pub s: f64,
    pub l: usize,
    pub m: usize,
    /// Inclusive `[low, high]` diffusion steps where transition guidance
    /// applies; every step when absent.
    pub tg_step_window: Option<(usize, usize)>,
    /// Scale of the gradient-editing baseline.
    pub grad_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            r: 100.0,
            s: 2.5,
            l: 4,
            m: 3,
            tg_step_window: None,
            grad_scale: 100.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(Error::Config(format!("r = {} must be finite and >= 0", self.r)));
        }
        if !self.s.is_finite() {
            return Err(Error::Config(format!("s = {} must be finite", self.s)));
        }
        if self.m == 0 || self.m > 2 * self.l + 1 {
            return Err(Error::Config(format!("m = {} outside [1, 2l+1 = {}]", self.m, 2 * self.l + 1)));
        }
        if !(self.grad_scale >= 0.0 && self.grad_scale.is_finite()) {
            return Err(Error::Config(format!("grad_scale = {} must be finite and >= 0", self.grad_scale)));
        }
        Ok(())
    }

    fn guides_at(&self, t: usize) -> bool {
        self.r > 0.0 && self.tg_step_window.is_none_or(|(lo, hi)| (lo..=hi).contains(&t))
    }
}

/// What to generate: a prompt, a length, and optional keyframes.
///
/// `keyframes` holds normalized values on keyframe rows (other rows ignored).
#[derive(Clone, Copy, Debug)]
pub struct SampleRequest<'a, T> {
    pub tokens: &'a [usize],
    pub frames: usize,
    pub keyframes: Option<(&'a Matrix<T>, &'a KeyframeMask)>,
}

impl<T: Scalar> SampleRequest<'_, T> {
    fn check(&self, dim: usize) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Input("cannot sample an empty sequence".into()));
        }
        if let Some((kf, mask)) = self.keyframes {
            if kf.shape() != (self.frames, dim) || mask.frames() != self.frames {
                return Err(Error::Shape(format!(
                    "keyframes {:?} over {} frames do not match {}×{dim}",
                    kf.shape(),
                    mask.frames(),
                    self.frames
                )));
            }
        }
        Ok(())
    }

    fn require_keyframes(&self) -> Result<(&Matrix<T>, &KeyframeMask)> {
        self.keyframes
            .ok_or_else(|| Error::Precondition("this strategy needs keyframes".into()))
    }
}

fn ensure_finite<T: Scalar>(x: &Matrix<T>, t: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sampling diverged at diffusion step {t}")))
    }
}

/// Ancestral reverse loop from `X_T ~ N(0, I)`.
///
/// `predict` returns the x₀ estimate and the mean adjustment to subtract;
/// `after_step` may rewrite `X_{t−1}`.
fn reverse_loop<T: Scalar>(
    sched: &DiffusionSchedule<T>,
    shape: (usize, usize),
    rng: &mut SeededRng,
    mut predict: impl FnMut(&Matrix<T>, usize) -> Result<(Matrix<T>, Option<Matrix<T>>)>,
    mut after_step: impl FnMut(&mut Matrix<T>, usize),
) -> Result<Matrix<T>> {
    let (n, d) = shape;
    let mut x = rng::standard_normal::<T>(rng, n, d);
    for t in (1..=sched.steps()).rev() {
        let (x0_hat, shift) = predict(&x, t)?;
        let mut mean = posterior_mean(&x0_hat, &x, t, sched)?;
        if let Some(shift) = shift {
            mean = mean.sub(&shift);
        }
        x = if t > 1 {
            let z = rng::standard_normal::<T>(rng, n, d);
            let sigma = sched.sigma2(t).sqrt();
            mean.zip_map(&z, |m, z| m + sigma * z)
        } else {
            mean
        };
        after_step(&mut x, t - 1);
        ensure_finite(&x, t)?;
    }
    Ok(x)
}

/// Text-only sampling under the null keyframe condition.
pub fn sample_plain<T: Scalar>(
    model: &DenoiserModel<T>,
    tokens: &[usize],
    frames: usize,
    sched: &DiffusionSchedule<T>,
    seed: u64,
) -> Result<Matrix<T>> {
    let req: SampleRequest<'_, T> = SampleRequest {
        tokens,
        frames,
        keyframes: None,
    };
    req.check(model.config().feature_dim)?;
    let null = model.keyframe_encode(frames, tokens, KeyframeCondition::Dropped, None)?;
    let mut r = rng::stream(seed, 0);
    reverse_loop(
        sched,
        (frames, model.config().feature_dim),
        &mut r,
        |x, t| Ok((model.denoise_with_memory(x, t, tokens, &null.memory, None)?, None)),
        |_, _| {},
    )
}

/// Keyframe-conditioned sampling with classifier-free and transition guidance.
/// Output is in normalized feature space.
pub fn sample<T: Scalar>(
    model: &DenoiserModel<T>,
    req: &SampleRequest<'_, T>,
    cfg: &SamplerConfig,
    sched: &DiffusionSchedule<T>,
) -> Result<Matrix<T>> {
    cfg.validate()?;
    req.check(model.config().feature_dim)?;
    let Some((kf, mask)) = req.keyframes else {
        return sample_plain(model, req.tokens, req.frames, sched, cfg.seed);
    };
    let n = req.frames;
    let cond = model.keyframe_encode(n, req.tokens, KeyframeCondition::Keyframes { values: kf, mask }, None)?;
    let null = model.keyframe_encode(n, req.tokens, KeyframeCondition::Dropped, None)?;
    let guide = if cfg.r > 0.0 {
        Some(TransitionGuide::new(mask, cfg.l, cfg.m)?)
    } else {
        None
    };
    let mut r = rng::stream(cfg.seed, 0);
    reverse_loop(
        sched,
        (n, model.config().feature_dim),
        &mut r,
        |x, t| {
            let c = model.denoise_with_memory(x, t, req.tokens, &cond.memory, None)?;
            let x0_hat = if cfg.s == 1.0 {
                c
            } else {
                let u = model.denoise_with_memory(x, t, req.tokens, &null.memory, None)?;
                cfg_combine(&c, &u, cfg.s)?
            };
            let shift = match &guide {
                Some(g) if cfg.guides_at(t) => {
                    let mean = posterior_mean(&x0_hat, x, t, sched)?;
                    let grad = g.grad(&assemble(&mean, kf, mask))?;
                    Some(grad.scale(T::lit(cfg.r) * sched.sigma2(t)))
                }
                _ => None,
            };
            Ok((x0_hat, shift))
        },
        |_, _| {},
    )
}

/// Inference-time inpainting: after every reverse step the keyframe rows of
/// `X_{t−1}` are replaced by the keyframes diffused to step `t−1`, and by the
/// clean keyframes at the end. With `overwrite = false` this is exactly
/// [`sample_plain`].
pub fn baseline_inpaint_sample<T: Scalar>(
    model: &DenoiserModel<T>,
    req: &SampleRequest<'_, T>,
    sched: &DiffusionSchedule<T>,
    seed: u64,
    overwrite: bool,
) -> Result<Matrix<T>> {
    req.check(model.config().feature_dim)?;
    let (kf, mask) = req.require_keyframes()?;
    let (n, d) = (req.frames, model.config().feature_dim);
    let null = model.keyframe_encode(n, req.tokens, KeyframeCondition::Dropped, None)?;
    let mut r = rng::stream(seed, 0);
    let mut overwrite_rng = rng::stream(seed, 1);
    reverse_loop(
        sched,
        (n, d),
        &mut r,
        |x, t| Ok((model.denoise_with_memory(x, t, req.tokens, &null.memory, None)?, None)),
        |x, t| {
            if !overwrite {
                return;
            }
            let target = if t == 0 {
                kf.clone()
            } else {
                let eps = rng::standard_normal::<T>(&mut overwrite_rng, n, d);
                q_sample(kf, t, &eps, sched).expect("step within schedule")
            };
            for &i in mask.keyframe_indices() {
                x.row_mut(i).copy_from_slice(target.row(i));
            }
        },
    )
}

/// Prediction and `∇_{X_t} ‖(X̂₀ − X_kf) ⊙ M‖²` under the null condition.
pub fn keyframe_gradient<T: Scalar>(
    model: &DenoiserModel<T>,
    x_t: &Matrix<T>,
    t: usize,
    tokens: &[usize],
    memory: &Matrix<T>,
    keyframes: &Matrix<T>,
    mask: &KeyframeMask,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut tape = Tape::new(model.params());
    let prompt = model.prompt_embedding(&mut tape, tokens)?;
    let x = tape.input(x_t.clone());
    let mem = tape.constant(memory.clone());
    let x0_hat = model.decode_on_tape(&mut tape, x, t, prompt, mem, None)?;
    let target = tape.constant(keyframes.clone());
    let resid = tape.sub(x0_hat, target);
    let loss = tape.weighted_sum_sq(resid, mask.matrix(x_t.cols()));
    let grads = tape.backward(loss);
    let g = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x_t.rows(), x_t.cols()));
    Ok((tape.value(x0_hat).clone(), g))
}

/// Inference-time gradient editing: the mean moves along
/// `−scale·σ_t²·∇_{X_t}‖(X̂₀ − X_kf) ⊙ M‖²`. With `scale = 0` this is exactly
/// [`sample_plain`].
pub fn baseline_gradient_sample<T: Scalar>(
    model: &DenoiserModel<T>,
    req: &SampleRequest<'_, T>,
    sched: &DiffusionSchedule<T>,
    seed: u64,
    scale: f64,
) -> Result<Matrix<T>> {
    req.check(model.config().feature_dim)?;
    let (kf, mask) = req.require_keyframes()?;
    let n = req.frames;
    let null = model.keyframe_encode(n, req.tokens, KeyframeCondition::Dropped, None)?;
    let mut r = rng::stream(seed, 0);
    reverse_loop(
        sched,
        (n, model.config().feature_dim),
        &mut r,
        |x, t| {
            if scale == 0.0 {
                return Ok((model.denoise_with_memory(x, t, req.tokens, &null.memory, None)?, None));
            }
            let (x0_hat, g) = keyframe_gradient(model, x, t, req.tokens, &null.memory, kf, mask)?;
            Ok((x0_hat, Some(g.scale(T::lit(scale) * sched.sigma2(t)))))
        },
        |_, _| {},
    )
}

/// Dispatches one strategy. `cond_model` serves `diffkfc`; the baselines use
/// `uncond_model`.
pub fn sample_strategy<T: Scalar>(
    strategy: Strategy,
    cond_model: &DenoiserModel<T>,
    uncond_model: &DenoiserModel<T>,
    req: &SampleRequest<'_, T>,
    cfg: &SamplerConfig,
    sched: &DiffusionSchedule<T>,
) -> Result<Matrix<T>> {
    match strategy {
        Strategy::DiffKfc => sample(cond_model, req, cfg, sched),
        Strategy::Inpaint => baseline_inpaint_sample(uncond_model, req, sched, cfg.seed, true),
        Strategy::Grad => baseline_gradient_sample(uncond_model, req, sched, cfg.seed, cfg.grad_scale),
        Strategy::TextOnly => sample_plain(uncond_model, req.tokens, req.frames, sched, cfg.seed),
    }
}
