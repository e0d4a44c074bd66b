//! Paired-trial evaluation of sampling strategies and the keyframe-rate
//! ablation.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::guidance::{sample, sample_strategy, SampleRequest, SamplerConfig, Strategy};
use crate::matrix::Matrix;
use crate::metrics::{ade, diversity, frechet_feature_distance, k_err, k_trans, MetricBundle};
use crate::motion_data::{sample_keyframe_mask, Corpus, KeyframeMask};
use crate::rng;
use crate::scalar::Scalar;

/// Trial-set parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub trials: usize,
    pub pair_count: usize,
    pub keyframe_rate: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            pair_count: 25,
            keyframe_rate: 0.05,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.pair_count == 0 {
            return Err(Error::Config("pair_count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.keyframe_rate) {
            return Err(Error::Config(format!("keyframe_rate {} outside [0, 1]", self.keyframe_rate)));
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        rng::derive(self.seed, 2 * trial as u64 + 1)
    }

    pub fn mask_seed(&self, trial: usize) -> u64 {
        rng::derive(self.seed, 2 * trial as u64)
    }
}

/// Ground truth of one trial: a held-out motion, its prompt and a mask.
#[derive(Clone, Debug)]
pub struct TrialCase {
    pub record_id: usize,
    pub tokens: Vec<usize>,
    /// Ground truth in data units.
    pub motion: Matrix<f64>,
    pub mask: KeyframeMask,
}

impl TrialCase {
    pub fn keyframes(&self) -> Matrix<f64> {
        self.mask.keyframe_part(&self.motion)
    }
}

/// Held-out records, cycled if there are fewer than `trials`. Keyframe sets
/// are nested across rates for a fixed seed.
pub fn trial_cases(corpus: &Corpus, cfg: &EvalConfig, rate: f64) -> Result<Vec<TrialCase>> {
    let mut pool: Vec<_> = corpus.holdout_records().collect();
    if pool.is_empty() {
        pool = corpus.records.iter().collect();
    }
    if pool.is_empty() {
        return Err(Error::Input("corpus has no records to evaluate on".into()));
    }
    (0..cfg.trials)
        .map(|t| {
            let rec = pool[t % pool.len()];
            Ok(TrialCase {
                record_id: rec.id,
                tokens: rec.prompt.tokens.clone(),
                motion: rec.motion.frames.clone(),
                mask: sample_keyframe_mask(rec.motion.len(), rate, cfg.mask_seed(t))?,
            })
        })
        .collect()
}

/// Per-trial metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub ade: f64,
    pub k_err: f64,
    pub k_trans: f64,
    /// K-TranS of the ground truth under the same keyframes.
    pub k_trans_reference: f64,
}

pub fn trial_metrics(case: &TrialCase, generated: &Matrix<f64>) -> Result<TrialMetrics> {
    let kf = case.keyframes();
    Ok(TrialMetrics {
        ade: ade(&case.motion, std::slice::from_ref(generated), &case.mask)?,
        k_err: k_err(generated, &kf, &case.mask)?,
        k_trans: k_trans(generated, &kf, &case.mask)?,
        k_trans_reference: k_trans(&case.motion, &kf, &case.mask)?,
    })
}

/// Models and normalization shared by all trials.
pub struct EvalContext<'a, T> {
    pub cond_model: &'a DenoiserModel<T>,
    pub uncond_model: &'a DenoiserModel<T>,
    pub sched: &'a DiffusionSchedule<T>,
    pub corpus: &'a Corpus,
}

impl<T: Scalar> EvalContext<'_, T> {
    fn normalized(&self, x: &Matrix<f64>) -> Result<Matrix<T>> {
        Ok(self.corpus.stats.normalize_frames(x)?.cast())
    }

    fn denormalized(&self, x: &Matrix<T>) -> Result<Matrix<f64>> {
        self.corpus.stats.denormalize_frames(&x.cast::<f64>())
    }

    /// Generates one trial with `strategy`; `conditioned = false` samples
    /// DiffKFC under the null keyframe condition.
    pub fn generate(
        &self,
        strategy: Strategy,
        case: &TrialCase,
        sampler: &SamplerConfig,
        conditioned: bool,
    ) -> Result<Matrix<f64>> {
        let gt = self.normalized(&case.motion)?;
        let kf = case.mask.keyframe_part(&gt);
        let req = SampleRequest {
            tokens: &case.tokens,
            frames: gt.rows(),
            keyframes: conditioned.then_some((&kf, &case.mask)),
        };
        let out = if conditioned {
            sample_strategy(strategy, self.cond_model, self.uncond_model, &req, sampler, self.sched)?
        } else {
            sample(self.cond_model, &req, sampler, self.sched)?
        };
        self.denormalized(&out)
    }
}

/// Aggregated results of one strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: String,
    pub metrics: MetricBundle,
    pub trials: Vec<TrialMetrics>,
}

/// Runs every strategy on the same trials. `sampler.seed` is replaced by the
/// per-trial seed.
pub fn evaluate_strategies<T: Scalar>(
    ctx: &EvalContext<'_, T>,
    cases: &[TrialCase],
    strategies: &[(String, Strategy, SamplerConfig)],
    eval: &EvalConfig,
    mut progress: impl FnMut(&str, usize),
) -> Result<Vec<StrategyReport>> {
    let real: Vec<Matrix<f64>> = cases.iter().map(|c| c.motion.clone()).collect();
    strategies
        .iter()
        .map(|(label, strategy, sampler)| {
            let mut trials = Vec::with_capacity(cases.len());
            let mut generated = Vec::with_capacity(cases.len());
            for (t, case) in cases.iter().enumerate() {
                let cfg = SamplerConfig {
                    seed: eval.trial_seed(t),
                    ..sampler.clone()
                };
                let g = ctx.generate(*strategy, case, &cfg, true)?;
                trials.push(trial_metrics(case, &g)?);
                generated.push(g);
                progress(label, t);
            }
            Ok(StrategyReport {
                strategy: label.clone(),
                metrics: summarize(&trials, &generated, &real, eval)?,
                trials,
            })
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean trial metrics plus set-level diversity and Fréchet distance.
pub fn summarize(
    trials: &[TrialMetrics],
    generated: &[Matrix<f64>],
    real: &[Matrix<f64>],
    eval: &EvalConfig,
) -> Result<MetricBundle> {
    let (diversity, frechet) = if generated.len() >= 2 && real.len() >= 2 {
        (
            diversity(generated, eval.pair_count, eval.seed)?,
            frechet_feature_distance(generated, real)?,
        )
    } else {
        (0.0, 0.0)
    };
    Ok(MetricBundle {
        ade: mean(trials.iter().map(|t| t.ade)),
        k_err: mean(trials.iter().map(|t| t.k_err)),
        k_trans: mean(trials.iter().map(|t| t.k_trans)),
        diversity,
        frechet,
    })
}

/// Mean K-TranS of real motion under the trial keyframes.
pub fn k_trans_reference(cases: &[TrialCase]) -> Result<f64> {
    let v = cases
        .iter()
        .map(|c| k_trans(&c.motion, &c.keyframes(), &c.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(v.into_iter()))
}

/// Keyframe rates of the ablation.
pub const ABLATION_RATES: [f64; 4] = [0.0, 0.02, 0.05, 0.10];

/// One ablation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rate: f64,
    pub metrics: MetricBundle,
    pub trials: Vec<TrialMetrics>,
}

/// Monotonicity flags of the ablation trend.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTrend {
    pub ade_non_increasing: bool,
    pub k_err_non_increasing: bool,
    /// K-Err at the lowest rate divided by K-Err at the highest rate.
    pub k_err_ratio: f64,
}

pub fn ablation_trend(rows: &[AblationRow]) -> AblationTrend {
    let non_inc = |f: fn(&MetricBundle) -> f64| rows.windows(2).all(|w| f(&w[1].metrics) <= f(&w[0].metrics));
    let ratio = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if b.metrics.k_err > 0.0 => a.metrics.k_err / b.metrics.k_err,
        _ => f64::INFINITY,
    };
    AblationTrend {
        ade_non_increasing: non_inc(|m| m.ade),
        k_err_non_increasing: non_inc(|m| m.k_err),
        k_err_ratio: ratio,
    }
}

/// DiffKFC across keyframe rates on nested keyframe sets. At rate 0 the
/// model samples under the null condition and K-Err is measured at the
/// single frame the mask still marks.
pub fn ablate<T: Scalar>(
    ctx: &EvalContext<'_, T>,
    rates: &[f64],
    sampler: &SamplerConfig,
    eval: &EvalConfig,
    mut progress: impl FnMut(f64, usize),
) -> Result<Vec<AblationRow>> {
    rates
        .iter()
        .map(|&rate| {
            let cases = trial_cases(ctx.corpus, eval, rate)?;
            let real: Vec<Matrix<f64>> = cases.iter().map(|c| c.motion.clone()).collect();
            let mut trials = Vec::with_capacity(cases.len());
            let mut generated = Vec::with_capacity(cases.len());
            for (t, case) in cases.iter().enumerate() {
                let cfg = SamplerConfig {
                    seed: eval.trial_seed(t),
                    ..sampler.clone()
                };
                let g = ctx.generate(Strategy::DiffKfc, case, &cfg, rate > 0.0)?;
                trials.push(trial_metrics(case, &g)?);
                generated.push(g);
                progress(rate, t);
            }
            Ok(AblationRow {
                rate,
                metrics: summarize(&trials, &generated, &real, eval)?,
                trials,
            })
        })
        .collect()
}
