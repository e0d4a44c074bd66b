//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use kfdiff::denoiser::DenoiserModel;
use kfdiff::diffusion::DiffusionSchedule;
use kfdiff::evaluation::{
    ablate, ablation_trend, evaluate_strategies, k_trans_reference, trial_cases, AblationRow, AblationTrend,
    EvalContext, StrategyReport,
};
use kfdiff::guidance::{sample_strategy, SampleRequest, SamplerConfig, Strategy};
use kfdiff::io::{
    keyframes_to_matrix, load_checkpoint, read_corpus, read_keyframes, save_checkpoint, write_corpus,
    write_keyframes, write_motion_csv, write_motion_jsonl, Checkpoint, CheckpointMeta, FORMAT_VERSION,
};
use kfdiff::matrix::Matrix;
use kfdiff::motion_data::{generate_corpus, sample_keyframe_mask, Corpus, KeyframeMask};
use kfdiff::rng;
use kfdiff::training::{TrainExample, Trainer};
use kfdiff::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Hex SHA-256 of a file.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn require<'a>(path: Option<&'a PathBuf>, flag: &str, command: &str) -> Result<&'a PathBuf> {
    path.ok_or_else(|| Error::Config(format!("{command} needs {flag}")))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

fn digest_of(path: &Path) -> Result<InputDigest> {
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: file_digest(path)?,
    })
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus_spec())?;
    write_corpus(out, &corpus)?;
    eprintln!("wrote {} sequences to {}", corpus.records.len(), out.display());
    Ok(())
}

/// Normalized training sequences of the training split.
pub fn training_examples(corpus: &Corpus) -> Result<Vec<TrainExample<f32>>> {
    corpus
        .train_records()
        .map(|r| {
            Ok(TrainExample {
                frames: corpus.stats.normalize_frames(&r.motion.frames)?.cast(),
                tokens: r.prompt.tokens.clone(),
            })
        })
        .collect()
}

/// Path of the loss log written next to a checkpoint.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.csv");
    checkpoint.with_file_name(name)
}

pub fn train(cfg: &RunConfig, corpus_path: &Path, out: &Path) -> Result<()> {
    let corpus = read_corpus(corpus_path)?;
    let data = training_examples(&corpus)?;
    let model_cfg = cfg.model_config(corpus.layout.dim(), corpus.vocab.len(), corpus.max_frames());
    let model = DenoiserModel::<f32>::new(model_cfg)?;
    let schedule = cfg.schedule();
    let mut trainer = Trainer::new(model, schedule.build()?, corpus.layout.clone(), cfg.train_config())?;

    let log_path = loss_log_path(out);
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    writeln!(log, "step,simple,phy,total")?;
    let mut io_err = None;
    let total = cfg.train.steps;
    trainer.run(&data, |step, l| {
        if let Err(e) = writeln!(log, "{step},{},{},{}", l.simple, l.phy, l.total) {
            io_err.get_or_insert(e);
        }
        if step % 100 == 0 || step == total {
            eprintln!("step {step}/{total} simple {:.5} phy {:.5} total {:.5}", l.simple, l.phy, l.total);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;

    let config = serde_json::json!({
        "run": cfg,
        "corpus": digest_of(corpus_path)?,
    });
    save_checkpoint(
        out,
        &trainer.model,
        CheckpointMeta {
            schedule: &schedule,
            stats: &corpus.stats,
            layout: &corpus.layout,
            vocab: &corpus.vocab,
            config,
        },
    )?;
    eprintln!("wrote checkpoint {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct SampleManifest<'a> {
    version: &'static str,
    config: &'a RunConfig,
    checkpoint: InputDigest,
    corpus: Option<InputDigest>,
    prompt: String,
    strategy: String,
    frames: usize,
    keyframe_indices: Vec<usize>,
    keyframe_file: String,
    samples: Vec<SampleEntry>,
}

#[derive(Serialize)]
struct SampleEntry {
    seed: u64,
    motion: String,
    csv: String,
}

struct SampleInputs {
    tokens: Vec<usize>,
    prompt: String,
    frames: usize,
    /// Data-unit keyframe matrix and mask.
    keyframes: Option<(Matrix<f64>, KeyframeMask)>,
}

fn sample_inputs(cfg: &RunConfig, ckpt: &Checkpoint<f32>, corpus: Option<&Path>) -> Result<SampleInputs> {
    let vocab = ckpt.vocabulary()?;
    let dim = ckpt.manifest.layout.dim();
    if let Some(id) = cfg.sample.record {
        let path = require(corpus.map(Path::to_path_buf).as_ref(), "--corpus", "sample with sample.record")?.clone();
        let corpus = read_corpus(&path)?;
        let rec = corpus
            .records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Input(format!("corpus has no record {id}")))?;
        let n = rec.motion.len();
        let keyframes = match &cfg.sample.keyframes {
            Some(p) => Some(keyframes_to_matrix(&read_keyframes(p)?, n, dim)?),
            None => {
                let mask = sample_keyframe_mask(n, cfg.sample.keyframe_rate, cfg.sample.seed)?;
                Some((mask.keyframe_part(&rec.motion.frames), mask))
            }
        };
        return Ok(SampleInputs {
            tokens: rec.prompt.tokens.clone(),
            prompt: rec.prompt.text.clone(),
            frames: n,
            keyframes,
        });
    }
    let prompt = cfg
        .sample
        .prompt
        .clone()
        .ok_or_else(|| Error::Config("sample needs sample.prompt or sample.record".into()))?;
    let tokens = vocab.encode(&prompt)?;
    let records = cfg.sample.keyframes.as_ref().map(|p| read_keyframes(p)).transpose()?;
    let frames = match (cfg.sample.frames, &records) {
        (Some(n), _) => n,
        (None, Some(r)) if !r.is_empty() => r.iter().map(|k| k.index).max().unwrap_or(0) + 1,
        _ => return Err(Error::Config("sample needs sample.frames when no keyframes are given".into())),
    };
    if frames > ckpt.manifest.model.max_frames {
        return Err(Error::Range(format!(
            "{frames} frames exceed the checkpoint maximum {}",
            ckpt.manifest.model.max_frames
        )));
    }
    let keyframes = records.map(|r| keyframes_to_matrix(&r, frames, dim)).transpose()?;
    Ok(SampleInputs {
        tokens,
        prompt,
        frames,
        keyframes,
    })
}

pub fn sample(cfg: &RunConfig, checkpoint: &Path, corpus: Option<&Path>, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(checkpoint)?;
    let sched: DiffusionSchedule<f32> = ckpt.manifest.schedule.build()?;
    let stats = &ckpt.manifest.stats;
    let strategy: Strategy = cfg.sample.strategy.parse()?;
    let inputs = sample_inputs(cfg, &ckpt, corpus)?;
    let normalized = inputs
        .keyframes
        .as_ref()
        .map(|(kf, mask)| Ok::<_, Error>((mask.keyframe_part(&stats.normalize_frames(kf)?.cast::<f32>()), mask.clone())))
        .transpose()?;
    let req = SampleRequest {
        tokens: &inputs.tokens,
        frames: inputs.frames,
        keyframes: normalized.as_ref().map(|(k, m)| (k, m)),
    };
    fs::create_dir_all(out)?;
    let keyframe_file = "keyframes.jsonl".to_string();
    match &inputs.keyframes {
        Some((kf, mask)) => write_keyframes(&out.join(&keyframe_file), kf, mask)?,
        None => fs::write(out.join(&keyframe_file), "")?,
    }
    let base = cfg.sampler_config()?;
    let mut samples = Vec::new();
    for k in 0..cfg.sample.num_samples {
        let seed = rng::derive(cfg.sample.seed, k as u64);
        let sampler = SamplerConfig { seed, ..base.clone() };
        let x = sample_strategy(strategy, &ckpt.model, &ckpt.model, &req, &sampler, &sched)?;
        let motion = stats.denormalize_frames(&x.cast::<f64>())?;
        let entry = SampleEntry {
            seed,
            motion: format!("motion_{k:03}.jsonl"),
            csv: format!("motion_{k:03}.csv"),
        };
        write_motion_jsonl(&out.join(&entry.motion), &motion)?;
        write_motion_csv(&out.join(&entry.csv), &motion)?;
        samples.push(entry);
    }
    write_json(
        &out.join("manifest.json"),
        &SampleManifest {
            version: FORMAT_VERSION,
            config: cfg,
            checkpoint: digest_of(checkpoint)?,
            corpus: corpus.filter(|_| cfg.sample.record.is_some()).map(digest_of).transpose()?,
            prompt: inputs.prompt,
            strategy: strategy.to_string(),
            frames: inputs.frames,
            keyframe_indices: inputs
                .keyframes
                .as_ref()
                .map(|(_, m)| m.keyframe_indices().to_vec())
                .unwrap_or_default(),
            keyframe_file,
            samples,
        },
    )?;
    eprintln!("wrote {} sample(s) to {}", cfg.sample.num_samples, out.display());
    Ok(())
}

struct Models {
    cond: Checkpoint<f32>,
    baseline: Option<Checkpoint<f32>>,
}

fn load_models(cfg: &RunConfig, checkpoint: &Path) -> Result<Models> {
    let cond = load_checkpoint::<f32>(checkpoint)?;
    let baseline = cfg.eval.baseline_checkpoint.as_deref().map(load_checkpoint::<f32>).transpose()?;
    if let Some(b) = &baseline {
        if b.manifest.schedule != cond.manifest.schedule || b.manifest.stats != cond.manifest.stats {
            return Err(Error::Input(
                "baseline checkpoint was trained with a different schedule or corpus".into(),
            ));
        }
    }
    Ok(Models { cond, baseline })
}

fn check_corpus(ckpt: &Checkpoint<f32>, corpus: &Corpus) -> Result<()> {
    if ckpt.manifest.stats != corpus.stats || ckpt.manifest.layout != corpus.layout {
        return Err(Error::Input("checkpoint was trained on a different corpus".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport<'a> {
    version: &'static str,
    config: &'a RunConfig,
    checkpoint: InputDigest,
    baseline_checkpoint: Option<InputDigest>,
    corpus: InputDigest,
    trials: usize,
    seeds: Vec<u64>,
    k_trans_reference: f64,
    strategies: Vec<StrategyReport>,
}

fn progress(label: &str, t: usize, trials: usize) {
    if (t + 1) % 10 == 0 || t + 1 == trials {
        eprintln!("{label}: {}/{trials} trials", t + 1);
    }
}

/// Table-shaped text rendering of an evaluation.
pub fn evaluation_table(reference: f64, reports: &[StrategyReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14}{:>10}{:>10}{:>10}{:>10}{:>11}", "Method", "ADE", "K-Err", "K-TranS", "FD", "Diversity");
    let _ = writeln!(s, "{:<14}{:>10}{:>10}{:>10.4}{:>10}{:>11}", "Real motion", "-", "-", reference, "-", "-");
    for r in reports {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<14}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>11.4}",
            r.strategy, m.ade, m.k_err, m.k_trans, m.frechet, m.diversity
        );
    }
    s
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, corpus_path: &Path, out: &Path) -> Result<()> {
    let models = load_models(cfg, checkpoint)?;
    let corpus = read_corpus(corpus_path)?;
    check_corpus(&models.cond, &corpus)?;
    let sched: DiffusionSchedule<f32> = models.cond.manifest.schedule.build()?;
    let eval = cfg.eval_config();
    eval.validate()?;
    let ctx = EvalContext {
        cond_model: &models.cond.model,
        uncond_model: models.baseline.as_ref().map_or(&models.cond.model, |b| &b.model),
        sched: &sched,
        corpus: &corpus,
    };
    let cases = trial_cases(&corpus, &eval, eval.keyframe_rate)?;
    let sampler = cfg.sampler_config()?;
    let strategies: Vec<(String, Strategy, SamplerConfig)> = cfg
        .strategies()?
        .into_iter()
        .map(|s| (s.to_string(), s, sampler.clone()))
        .collect();
    let reports = evaluate_strategies(&ctx, &cases, &strategies, &eval, |l, t| progress(l, t, eval.trials))?;
    let reference = k_trans_reference(&cases)?;
    fs::create_dir_all(out)?;
    write_json(
        &out.join("report.json"),
        &EvaluationReport {
            version: FORMAT_VERSION,
            config: cfg,
            checkpoint: digest_of(checkpoint)?,
            baseline_checkpoint: cfg.eval.baseline_checkpoint.as_deref().map(digest_of).transpose()?,
            corpus: digest_of(corpus_path)?,
            trials: eval.trials,
            seeds: (0..eval.trials).map(|t| eval.trial_seed(t)).collect(),
            k_trans_reference: reference,
            strategies: reports.clone(),
        },
    )?;
    let table = evaluation_table(reference, &reports);
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct AblationReport<'a> {
    version: &'static str,
    config: &'a RunConfig,
    checkpoint: InputDigest,
    corpus: InputDigest,
    trials: usize,
    seeds: Vec<u64>,
    rows: Vec<AblationRow>,
    trend: AblationTrend,
}

pub fn ablation_table(rows: &[AblationRow], trend: &AblationTrend) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10}{:>10}{:>10}{:>10}{:>10}", "Keyframes", "ADE", "K-Err", "K-TranS", "FD");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<10}{:>10.4}{:>10.4}{:>10.4}{:>10.4}",
            format!("{}%", r.rate * 100.0),
            m.ade,
            m.k_err,
            m.k_trans,
            m.frechet
        );
    }
    let yes = |b: bool| if b { "yes" } else { "no" };
    let _ = writeln!(s, "ADE non-increasing: {}", yes(trend.ade_non_increasing));
    let _ = writeln!(s, "K-Err non-increasing: {}", yes(trend.k_err_non_increasing));
    let _ = writeln!(s, "K-Err ratio (lowest/highest rate): {:.3}", trend.k_err_ratio);
    s
}

pub fn ablate_cmd(cfg: &RunConfig, checkpoint: &Path, corpus_path: &Path, out: &Path) -> Result<()> {
    let models = load_models(cfg, checkpoint)?;
    let corpus = read_corpus(corpus_path)?;
    check_corpus(&models.cond, &corpus)?;
    let sched: DiffusionSchedule<f32> = models.cond.manifest.schedule.build()?;
    let eval = cfg.eval_config();
    eval.validate()?;
    let ctx = EvalContext {
        cond_model: &models.cond.model,
        uncond_model: &models.cond.model,
        sched: &sched,
        corpus: &corpus,
    };
    let rows = ablate(&ctx, &cfg.eval.rates, &cfg.sampler_config()?, &eval, |rate, t| {
        progress(&format!("rate {rate}"), t, eval.trials)
    })?;
    let trend = ablation_trend(&rows);
    fs::create_dir_all(out)?;
    write_json(
        &out.join("ablation.json"),
        &AblationReport {
            version: FORMAT_VERSION,
            config: cfg,
            checkpoint: digest_of(checkpoint)?,
            corpus: digest_of(corpus_path)?,
            trials: eval.trials,
            seeds: (0..eval.trials).map(|t| eval.trial_seed(t)).collect(),
            rows: rows.clone(),
            trend,
        },
    )?;
    let table = ablation_table(&rows, &trend);
    fs::write(out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
