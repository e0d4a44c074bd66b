//! Noise schedule, closed-form forward process, the x₀-parameterized
//! posterior, and the masked training losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::motion_data::{FeatureLayout, KeyframeMask};
use crate::scalar::Scalar;

/// Upper clip for every `β_t`.
pub const MAX_BETA: f64 = 0.999;
/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

/// Which variance the reverse step uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    /// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`
    #[default]
    Posterior,
    /// `β_t`
    Beta,
}

/// Serializable description from which a schedule is rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub kind: String,
    pub variance: VarianceKind,
}

impl ScheduleParams {
    pub fn cosine(steps: usize) -> Self {
        Self {
            steps,
            kind: "cosine".into(),
            variance: VarianceKind::Posterior,
        }
    }

    pub fn build<T: Scalar>(&self) -> Result<DiffusionSchedule<T>> {
        match self.kind.as_str() {
            "cosine" => Ok(DiffusionSchedule::cosine(self.steps)?.with_variance(self.variance)),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Per-step schedule arrays, indexed by `t ∈ [1, T]` through accessors.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule<T> {
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
    posterior_variance: Vec<T>,
    c1: Vec<T>,
    c2: Vec<T>,
    variance: VarianceKind,
}

/// Continuous cosine `ᾱ(τ)` for `τ = t/T ∈ [0, 1]`, normalized so `ᾱ(0) = 1`.
pub fn cosine_alpha_bar(tau: f64) -> f64 {
    let f = |x: f64| ((x + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    f(tau) / f(0.0)
}

impl<T: Scalar> DiffusionSchedule<T> {
    /// Cosine schedule with `β_t = min(1 − ᾱ(t/T)/ᾱ((t−1)/T), 0.999)`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas = (1..=steps)
            .map(|t| {
                let r = cosine_alpha_bar(t as f64 / steps as f64)
                    / cosine_alpha_bar((t - 1) as f64 / steps as f64);
                (1.0 - r).min(MAX_BETA)
            })
            .collect::<Vec<_>>();
        Self::from_betas(&betas)
    }

    /// Schedule from explicit `β_1 … β_T`, each in `(0, 0.999]`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b <= MAX_BETA)) {
            return Err(Error::Config(format!("beta {b} outside (0, {MAX_BETA}]")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for &b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let mut post = Vec::with_capacity(betas.len());
        let mut c1 = Vec::with_capacity(betas.len());
        let mut c2 = Vec::with_capacity(betas.len());
        for (i, &b) in betas.iter().enumerate() {
            let ab = alpha_bar[i];
            let ab_prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            post.push(b * (1.0 - ab_prev) / (1.0 - ab));
            c1.push(ab_prev.sqrt() * b / (1.0 - ab));
            c2.push((1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        }
        let cast = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        Ok(Self {
            beta: cast(betas),
            alpha: cast(&betas.iter().map(|b| 1.0 - b).collect::<Vec<_>>()),
            alpha_bar: cast(&alpha_bar),
            posterior_variance: cast(&post),
            c1: cast(&c1),
            c2: cast(&c2),
            variance: VarianceKind::Posterior,
        })
    }

    pub fn with_variance(mut self, variance: VarianceKind) -> Self {
        self.variance = variance;
        self
    }

    pub fn variance_kind(&self) -> VarianceKind {
        self.variance
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range(format!("step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> T {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior mean coefficients `(c1, c2)` at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> (T, T) {
        (self.c1[t - 1], self.c2[t - 1])
    }

    /// Reverse-step variance `σ_t²` under the selected [`VarianceKind`].
    pub fn sigma2(&self, t: usize) -> T {
        match self.variance {
            VarianceKind::Posterior => self.posterior_variance[t - 1],
            VarianceKind::Beta => self.beta[t - 1],
        }
    }

    pub fn betas(&self) -> &[T] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }

    /// Whether every array entry is finite.
    pub fn is_finite(&self) -> bool {
        [
            &self.beta,
            &self.alpha,
            &self.alpha_bar,
            &self.posterior_variance,
            &self.c1,
            &self.c2,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// `√ᾱ · x0 + √(1 − ᾱ) · eps` for an explicit `ᾱ ∈ [0, 1]`.
pub fn q_sample_with<T: Scalar>(alpha_bar: T, x0: &Matrix<T>, eps: &Matrix<T>) -> Matrix<T> {
    let a = alpha_bar.sqrt();
    let b = (T::one() - alpha_bar).sqrt();
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Closed-form forward diffusion to step `t`.
pub fn q_sample<T: Scalar>(
    x0: &Matrix<T>,
    t: usize,
    eps: &Matrix<T>,
    sched: &DiffusionSchedule<T>,
) -> Result<Matrix<T>> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match sample {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    Ok(q_sample_with(sched.alpha_bar(t), x0, eps))
}

/// One forward transition `x_t = √(1 − β_t) x_{t−1} + √β_t · eps`.
pub fn q_step<T: Scalar>(
    x_prev: &Matrix<T>,
    t: usize,
    eps: &Matrix<T>,
    sched: &DiffusionSchedule<T>,
) -> Result<Matrix<T>> {
    sched.check_step(t)?;
    let a = sched.alpha(t).sqrt();
    let b = sched.beta(t).sqrt();
    Ok(x_prev.zip_map(eps, |x, e| a * x + b * e))
}

/// Mean of `q(x_{t−1} | x_t, x̂0) = c1·x̂0 + c2·x_t`.
pub fn posterior_mean<T: Scalar>(
    x0_hat: &Matrix<T>,
    x_t: &Matrix<T>,
    t: usize,
    sched: &DiffusionSchedule<T>,
) -> Result<Matrix<T>> {
    sched.check_step(t)?;
    if x0_hat.shape() != x_t.shape() {
        return Err(Error::Shape("posterior inputs differ in shape".into()));
    }
    let (c1, c2) = sched.posterior_coefficients(t);
    Ok(x0_hat.zip_map(x_t, |a, b| c1 * a + c2 * b))
}

/// Relative weights of the kinematic loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub phy: f64,
    pub velocity: f64,
    pub foot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            phy: 1.0,
            velocity: 1.0,
            foot: 1.0,
        }
    }
}

fn check_same(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Weight matrices that turn each loss into `Σ W ⊙ r²` for a residual `r`.
///
/// Shared by the direct evaluators and the differentiable versions.
#[derive(Clone, Debug)]
pub struct MaskedLossPlan<T> {
    /// `(1 − M)` divided by the number of target entries.
    pub simple: Matrix<T>,
    /// Position channels on target rows, mean-normalized.
    pub position: Matrix<T>,
    /// `(N−1) × D` over first differences touching a target frame.
    pub velocity: Matrix<T>,
    /// `(N−1) × D` contact-weighted foot channels of the prediction.
    pub foot: Matrix<T>,
}

impl<T: Scalar> MaskedLossPlan<T> {
    /// `x0` supplies the ground-truth contact indicators.
    pub fn new(x0: &Matrix<T>, mask: &KeyframeMask, layout: &FeatureLayout) -> Result<Self> {
        let (n, d) = x0.shape();
        if d != layout.dim() {
            return Err(Error::Shape(format!("{d} channels, layout declares {}", layout.dim())));
        }
        if mask.frames() != n {
            return Err(Error::Shape(format!("mask covers {} frames, motion has {n}", mask.frames())));
        }
        let flags = mask.row_flags();
        let targets = flags.iter().filter(|k| !**k).count();
        if targets == 0 {
            return Err(Error::UndefinedLoss("every frame is a keyframe; no target entries".into()));
        }
        let inv = T::one() / T::lit((targets * d) as f64);
        let simple = Matrix::from_fn(n, d, |i, _| if flags[i] { T::zero() } else { inv });

        let pos = layout.position_channels();
        let inv_pos = T::one() / T::lit((targets * pos.len()) as f64);
        let position = Matrix::from_fn(n, d, |i, c| {
            if !flags[i] && pos.contains(&c) {
                inv_pos
            } else {
                T::zero()
            }
        });

        let steps = n.saturating_sub(1);
        let vel_rows: Vec<bool> = (0..steps).map(|i| !flags[i] || !flags[i + 1]).collect();
        let vel_count = vel_rows.iter().filter(|v| **v).count() * pos.len();
        let inv_vel = if vel_count > 0 {
            T::one() / T::lit(vel_count as f64)
        } else {
            T::zero()
        };
        let velocity = Matrix::from_fn(steps, d, |i, c| {
            if vel_rows[i] && pos.contains(&c) {
                inv_vel
            } else {
                T::zero()
            }
        });

        let inv_steps = if steps > 0 {
            T::one() / T::lit(steps as f64)
        } else {
            T::zero()
        };
        let contacts = layout.contact_channels();
        let mut foot = Matrix::zeros(steps, d);
        for (k, &fj) in layout.foot_joints.iter().enumerate() {
            let cc = contacts.start + k;
            for i in 0..steps {
                let w = x0[(i, cc)] * inv_steps;
                for c in layout.joint_channels(fj) {
                    foot[(i, c)] += w;
                }
            }
        }
        Ok(Self {
            simple,
            position,
            velocity,
            foot,
        })
    }
}

/// Mean squared error over target (non-keyframe) entries.
pub fn simple_loss<T: Scalar>(x0: &Matrix<T>, x0_hat: &Matrix<T>, mask: &KeyframeMask) -> Result<T> {
    check_same(x0.shape(), x0_hat.shape(), "simple_loss")?;
    if mask.frames() != x0.rows() {
        return Err(Error::Shape("mask length differs from motion".into()));
    }
    let flags = mask.row_flags();
    let mut sum = T::zero();
    let mut count = 0usize;
    for (i, &kf) in flags.iter().enumerate() {
        if kf {
            continue;
        }
        for (a, b) in x0.row(i).iter().zip(x0_hat.row(i)) {
            sum += (*a - *b) * (*a - *b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedLoss("every frame is a keyframe; no target entries".into()));
    }
    Ok(sum / T::lit(count as f64))
}

/// Kinematic loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhyLoss<T> {
    pub position: T,
    pub velocity: T,
    pub foot: T,
    pub total: T,
}

/// Position, velocity and foot-contact losses.
///
/// Position and velocity terms are masked to target frames; the foot term
/// penalizes predicted foot-joint velocity wherever the ground truth marks
/// contact, over all frames.
pub fn phy_loss<T: Scalar>(
    x0: &Matrix<T>,
    x0_hat: &Matrix<T>,
    mask: &KeyframeMask,
    layout: &FeatureLayout,
    weights: &LossWeights,
) -> Result<PhyLoss<T>> {
    check_same(x0.shape(), x0_hat.shape(), "phy_loss")?;
    let plan = MaskedLossPlan::new(x0, mask, layout)?;
    let resid = x0_hat.sub(x0);
    let wsum = |w: &Matrix<T>, r: &Matrix<T>| -> T {
        w.as_slice()
            .iter()
            .zip(r.as_slice())
            .map(|(&w, &r)| w * r * r)
            .sum()
    };
    let position = wsum(&plan.position, &resid);
    let diff = |m: &Matrix<T>| {
        Matrix::from_fn(m.rows().saturating_sub(1), m.cols(), |i, c| m[(i + 1, c)] - m[(i, c)])
    };
    let velocity = wsum(&plan.velocity, &diff(&resid));
    let foot = wsum(&plan.foot, &diff(x0_hat));
    let total = position + T::lit(weights.velocity) * velocity + T::lit(weights.foot) * foot;
    Ok(PhyLoss {
        position,
        velocity,
        foot,
        total,
    })
}

/// Differentiable `(simple, phy)` losses of a prediction node.
pub fn tape_losses<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x0: &Matrix<T>,
    x0_hat: Var,
    plan: &MaskedLossPlan<T>,
    weights: &LossWeights,
) -> (Var, Var) {
    let target = tape.constant(x0.clone());
    let resid = tape.sub(x0_hat, target);
    let simple = tape.weighted_sum_sq(resid, plan.simple.clone());
    let position = tape.weighted_sum_sq(resid, plan.position.clone());
    let n = x0.rows();
    if n < 2 {
        return (simple, position);
    }
    let r_next = tape.slice_rows(resid, 1, n - 1);
    let r_prev = tape.slice_rows(resid, 0, n - 1);
    let dr = tape.sub(r_next, r_prev);
    let velocity = tape.weighted_sum_sq(dr, plan.velocity.clone());
    let p_next = tape.slice_rows(x0_hat, 1, n - 1);
    let p_prev = tape.slice_rows(x0_hat, 0, n - 1);
    let dp = tape.sub(p_next, p_prev);
    let foot = tape.weighted_sum_sq(dp, plan.foot.clone());
    let velocity = tape.scale(velocity, T::lit(weights.velocity));
    let foot = tape.scale(foot, T::lit(weights.foot));
    let phy = tape.add(position, velocity);
    let phy = tape.add(phy, foot);
    (simple, phy)
}
