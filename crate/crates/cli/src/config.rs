//! Run configuration: file, then `KFDIFF_` environment overrides, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kfdiff::denoiser::{DenoiserConfig, DEFAULT_DILATION_PREFIX};
use kfdiff::diffusion::{LossWeights, ScheduleParams};
use kfdiff::evaluation::{EvalConfig, ABLATION_RATES};
use kfdiff::guidance::{SamplerConfig, Strategy};
use kfdiff::motion_data::CorpusSpec;
use kfdiff::training::TrainConfig;
use kfdiff::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ENV_PREFIX: &str = "KFDIFF_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub size: usize,
    #[serde(rename = "N_max", alias = "n_max")]
    pub n_max: usize,
    pub seed: u64,
    pub noise_scale: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let s = CorpusSpec::default();
        Self {
            size: s.size,
            n_max: s.max_frames,
            seed: s.seed,
            noise_scale: s.noise_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(rename = "T", alias = "t")]
    pub diffusion_steps: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Linear warmup steps before cosine decay.
    pub warmup: usize,
    pub final_lr_ratio: f64,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dilation: Vec<usize>,
    pub keyframe_rate: f64,
    pub dropout_rate: f64,
    pub lambda_phy: f64,
    pub lambda_vel: f64,
    pub lambda_foot: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            diffusion_steps: 100,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            warmup: t.warmup,
            final_lr_ratio: t.final_lr_ratio,
            d: 64,
            layers: 4,
            heads: 4,
            ff_width: 128,
            dilation: DEFAULT_DILATION_PREFIX.to_vec(),
            keyframe_rate: t.keyframe_rate,
            dropout_rate: t.dropout_rate,
            lambda_phy: 1.0,
            lambda_vel: 1.0,
            lambda_foot: 1.0,
            grad_clip: t.grad_clip,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub r: f64,
    pub s: f64,
    pub l: usize,
    pub m: usize,
    pub strategy: String,
    pub num_samples: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub prompt: Option<String>,
    pub keyframes: Option<PathBuf>,
    pub frames: Option<usize>,
    /// Corpus record supplying prompt, length and keyframes.
    pub record: Option<usize>,
    pub keyframe_rate: f64,
    pub tg_step_window: Option<[usize; 2]>,
    pub grad_scale: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            r: s.r,
            s: s.s,
            l: s.l,
            m: s.m,
            strategy: Strategy::DiffKfc.to_string(),
            num_samples: 1,
            seed: 0,
            checkpoint: None,
            prompt: None,
            keyframes: None,
            frames: None,
            record: None,
            keyframe_rate: 0.05,
            tg_step_window: None,
            grad_scale: s.grad_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub trials: usize,
    pub pair_count: usize,
    pub seed: u64,
    pub keyframe_rate: f64,
    pub strategies: Vec<String>,
    pub rates: Vec<f64>,
    /// Unconditionally trained checkpoint for the baselines; the DiffKFC
    /// checkpoint under the null condition is used when absent.
    pub baseline_checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            trials: e.trials,
            pair_count: e.pair_count,
            seed: e.seed,
            keyframe_rate: e.keyframe_rate,
            strategies: Strategy::ALL.iter().map(|s| s.to_string()).collect(),
            rates: ABLATION_RATES.to_vec(),
            baseline_checkpoint: None,
        }
    }
}

/// Fully resolved configuration; echoed into every artifact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses a TOML or JSON (by `.json` extension) configuration file.
pub fn parse_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("config {}: {e}", path.display())))
    })?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    } else {
        let v: toml::Value = toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        serde_json::to_value(v).map_err(config_error)
    }
}

/// Merges `patch` into `base`, recursing into objects.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn env_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `KFDIFF_<SECTION>_<KEY>` variables. Keys match case-insensitively.
pub fn apply_env(base: &mut Value, vars: &BTreeMap<String, String>) -> Result<()> {
    let defaults = serde_json::to_value(RunConfig::default()).map_err(config_error)?;
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let lower = rest.to_ascii_lowercase();
        let Some((section, key)) = lower.split_once('_') else {
            return Err(Error::Config(format!("environment override {name} names no key")));
        };
        let known = defaults
            .get(section)
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Config(format!("environment override {name}: unknown section '{section}'")))?;
        let field = known
            .keys()
            .find(|k| k.to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Config(format!("environment override {name}: unknown key '{key}'")))?
            .clone();
        let mut patch = serde_json::Map::new();
        patch.insert(field, env_value(raw));
        let mut outer = serde_json::Map::new();
        outer.insert(section.to_string(), Value::Object(patch));
        merge(base, Value::Object(outer));
    }
    Ok(())
}

pub fn env_overrides() -> BTreeMap<String, String> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

impl RunConfig {
    /// File, then environment, then `flags` (a partial config object).
    pub fn resolve(file: Option<&Path>, env: &BTreeMap<String, String>, flags: Value) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default()).map_err(config_error)?;
        if let Some(path) = file {
            merge(&mut v, parse_file(path)?);
        }
        apply_env(&mut v, env)?;
        merge(&mut v, flags);
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| config_error(format!("config schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus_spec().validate()?;
        self.train_config().validate()?;
        self.sampler_config()?.validate()?;
        self.eval_config().validate()?;
        if self.train.diffusion_steps == 0 {
            return Err(Error::Config("train.T must be at least 1".into()));
        }
        for s in &self.eval.strategies {
            s.parse::<Strategy>()?;
        }
        if self.sample.num_samples == 0 {
            return Err(Error::Config("sample.num_samples must be at least 1".into()));
        }
        if self.eval.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("eval.rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            size: self.corpus.size,
            max_frames: self.corpus.n_max,
            seed: self.corpus.seed,
            noise_scale: self.corpus.noise_scale,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch: self.train.batch,
            lr: self.train.lr,
            warmup: self.train.warmup,
            final_lr_ratio: self.train.final_lr_ratio,
            keyframe_rate: self.train.keyframe_rate,
            dropout_rate: self.train.dropout_rate,
            weights: LossWeights {
                phy: self.train.lambda_phy,
                velocity: self.train.lambda_vel,
                foot: self.train.lambda_foot,
            },
            grad_clip: self.train.grad_clip,
            seed: self.train.seed,
        }
    }

    pub fn model_config(&self, feature_dim: usize, vocab_size: usize, max_frames: usize) -> DenoiserConfig {
        DenoiserConfig {
            feature_dim,
            latent_dim: self.train.d,
            heads: self.train.heads,
            decoder_layers: self.train.layers,
            ff_width: self.train.ff_width,
            vocab_size,
            max_frames,
            dilation_prefix: self.train.dilation.clone(),
            init_seed: self.train.seed,
        }
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams::cosine(self.train.diffusion_steps)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            r: self.sample.r,
            s: self.sample.s,
            l: self.sample.l,
            m: self.sample.m,
            tg_step_window: self.sample.tg_step_window.map(|[a, b]| (a, b)),
            grad_scale: self.sample.grad_scale,
            seed: self.sample.seed,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            trials: self.eval.trials,
            pair_count: self.eval.pair_count,
            keyframe_rate: self.eval.keyframe_rate,
            seed: self.eval.seed,
        }
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        self.eval.strategies.iter().map(|s| s.parse()).collect()
    }
}
