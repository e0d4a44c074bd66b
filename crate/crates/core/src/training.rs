//! Batched training of the denoiser with keyframe dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::denoiser::{DenoiserModel, KeyframeCondition};
use crate::diffusion::{q_sample, tape_losses, DiffusionSchedule, LossWeights, MaskedLossPlan};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::motion_data::{sample_keyframe_mask, FeatureLayout, KeyframeMask};
use crate::nn::{clip_global_norm, Adam};
use crate::rng;
use crate::scalar::Scalar;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Learning rate at the last step relative to `lr`, reached by cosine decay.
    pub final_lr_ratio: f64,
    /// Mean keyframe rate; each sample draws its rate from `[0, 2·rate]`.
    pub keyframe_rate: f64,
    pub dropout_rate: f64,
    pub weights: LossWeights,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            warmup: 0,
            final_lr_ratio: 1.0,
            keyframe_rate: 0.05,
            dropout_rate: 0.1,
            weights: LossWeights::default(),
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate of optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cos)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::Config(format!("final_lr_ratio {} outside [0, 1]", self.final_lr_ratio)));
        }
        if !(0.0..=0.5).contains(&self.keyframe_rate) {
            return Err(Error::Config(format!("keyframe_rate {} outside [0, 0.5]", self.keyframe_rate)));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1]", self.dropout_rate)));
        }
        Ok(())
    }
}

/// One normalized training sequence.
#[derive(Clone, Debug)]
pub struct TrainExample<T> {
    pub frames: Matrix<T>,
    pub tokens: Vec<usize>,
}

/// One element of a batch, with all randomness already drawn.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub x0: Matrix<T>,
    pub tokens: Vec<usize>,
    pub mask: KeyframeMask,
    pub t: usize,
    pub noise: Matrix<T>,
    pub dropout: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainBatch<T> {
    pub samples: Vec<TrainSample<T>>,
}

impl<T: Scalar> TrainBatch<T> {
    /// Draws batch `step` deterministically from `(cfg.seed, step)`.
    pub fn draw(
        data: &[TrainExample<T>],
        step: usize,
        cfg: &TrainConfig,
        steps_t: usize,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("no training sequences".into()));
        }
        let mut r = rng::stream(rng::derive(cfg.seed, step as u64), 1);
        let samples = (0..cfg.batch)
            .map(|_| {
                let ex = &data[r.random_range(0..data.len())];
                let n = ex.frames.rows();
                let rate = r.random_range(0.0..=2.0 * cfg.keyframe_rate).min(1.0);
                let mut mask = sample_keyframe_mask(n, rate, r.random())?;
                if mask.count() == n {
                    mask = KeyframeMask::new(n, mask.keyframe_indices()[..n - 1].to_vec())?;
                }
                Ok(TrainSample {
                    x0: ex.frames.clone(),
                    tokens: ex.tokens.clone(),
                    mask,
                    t: r.random_range(1..=steps_t),
                    noise: rng::standard_normal(&mut r, n, ex.frames.cols()),
                    dropout: r.random_bool(cfg.dropout_rate),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }
}

/// Batch-mean losses of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub simple: f64,
    pub phy: f64,
    pub total: f64,
}

/// Loss and parameter gradients of a single sample, summed into `acc`.
pub fn accumulate_sample<T: Scalar>(
    model: &DenoiserModel<T>,
    sched: &DiffusionSchedule<T>,
    layout: &FeatureLayout,
    weights: &LossWeights,
    sample: &TrainSample<T>,
    grad_scale: T,
    acc: &mut [Matrix<T>],
) -> Result<StepLosses> {
    let x_t = q_sample(&sample.x0, sample.t, &sample.noise, sched)?;
    let plan = MaskedLossPlan::new(&sample.x0, &sample.mask, layout)?;
    let kf = sample.mask.keyframe_part(&sample.x0);
    let condition = if sample.dropout {
        KeyframeCondition::Dropped
    } else {
        KeyframeCondition::Keyframes {
            values: &kf,
            mask: &sample.mask,
        }
    };
    let mut tape = Tape::new(model.params());
    let x = tape.input(x_t);
    let x0_hat = model.forward_on_tape(&mut tape, x, sample.t, &sample.tokens, condition, None)?;
    let (simple, phy) = tape_losses(&mut tape, &sample.x0, x0_hat, &plan, weights);
    let phy_w = tape.scale(phy, T::lit(weights.phy));
    let total = tape.add(simple, phy_w);
    let losses = StepLosses {
        simple: tape.value(simple)[(0, 0)].to_f64_lossy(),
        phy: tape.value(phy)[(0, 0)].to_f64_lossy(),
        total: tape.value(total)[(0, 0)].to_f64_lossy(),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss is {} at diffusion step {}",
            losses.total, sample.t
        )));
    }
    let grads = tape.backward_with(total, Matrix::filled(1, 1, grad_scale));
    for (i, id) in model.params().ids().enumerate() {
        if let Some(g) = grads.param(id) {
            acc[i].axpy(T::one(), g);
        }
    }
    Ok(losses)
}

/// Gradients of the batch-mean total loss, one matrix per parameter.
pub fn batch_gradients<T: Scalar>(
    model: &DenoiserModel<T>,
    sched: &DiffusionSchedule<T>,
    layout: &FeatureLayout,
    weights: &LossWeights,
    batch: &TrainBatch<T>,
) -> Result<(Vec<Matrix<T>>, StepLosses)> {
    if batch.samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut acc: Vec<Matrix<T>> = model
        .params()
        .iter()
        .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    let b = batch.samples.len() as f64;
    let scale = T::lit(1.0 / b);
    let mut sum = StepLosses {
        simple: 0.0,
        phy: 0.0,
        total: 0.0,
    };
    for s in &batch.samples {
        let l = accumulate_sample(model, sched, layout, weights, s, scale, &mut acc)?;
        sum.simple += l.simple / b;
        sum.phy += l.phy / b;
        sum.total += l.total / b;
    }
    Ok((acc, sum))
}

/// One optimizer step on `batch`.
pub fn train_step<T: Scalar>(
    model: &mut DenoiserModel<T>,
    opt: &mut Adam<T>,
    sched: &DiffusionSchedule<T>,
    layout: &FeatureLayout,
    cfg: &TrainConfig,
    batch: &TrainBatch<T>,
) -> Result<StepLosses> {
    let (mut grads, losses) = batch_gradients(model, sched, layout, &cfg.weights, batch)?;
    clip_global_norm(&mut grads, cfg.grad_clip);
    opt.update(model.params_mut(), &grads);
    Ok(losses)
}

/// Training loop state.
pub struct Trainer<T> {
    pub model: DenoiserModel<T>,
    pub opt: Adam<T>,
    pub sched: DiffusionSchedule<T>,
    pub layout: FeatureLayout,
    pub cfg: TrainConfig,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: DenoiserModel<T>,
        sched: DiffusionSchedule<T>,
        layout: FeatureLayout,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(model.params(), cfg.lr);
        Ok(Self {
            model,
            opt,
            sched,
            layout,
            cfg,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn train_one(&mut self, data: &[TrainExample<T>]) -> Result<StepLosses> {
        let batch = TrainBatch::draw(data, self.step, &self.cfg, self.sched.steps())?;
        self.opt.lr = self.cfg.lr_at(self.step);
        let losses = train_step(
            &mut self.model,
            &mut self.opt,
            &self.sched,
            &self.layout,
            &self.cfg,
            &batch,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("step {}: {msg}", self.step)),
            other => other,
        })?;
        self.step += 1;
        Ok(losses)
    }

    /// Runs the remaining configured steps, reporting each step's losses.
    pub fn run(
        &mut self,
        data: &[TrainExample<T>],
        mut on_step: impl FnMut(usize, &StepLosses),
    ) -> Result<()> {
        while self.step < self.cfg.steps {
            let losses = self.train_one(data)?;
            on_step(self.step, &losses);
        }
        Ok(())
    }

    pub fn into_model(self) -> DenoiserModel<T> {
        self.model
    }
}
