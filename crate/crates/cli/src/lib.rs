//! Command-line driver: `gen-data`, `train`, `sample`, `evaluate` and `ablate`.

pub mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kfdiff::{Error, Result};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "kfdiff", version, about = "Keyframe-conditioned text-to-motion diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic motion corpus.
    GenData(Flags),
    /// Train a denoiser checkpoint.
    Train(Flags),
    /// Sample motions from a checkpoint.
    Sample(Flags),
    /// Compare sampling strategies on held-out trials.
    Evaluate(Flags),
    /// Sweep the keyframe rate.
    Ablate(Flags),
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    /// TOML or JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the command's own section.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// diffkfc, inpaint, grad or text-only.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Keyframe rate.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Transition guidance strength.
    #[arg(long)]
    pub r: Option<f64>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Command::GenData(f)
            | Command::Train(f)
            | Command::Sample(f)
            | Command::Evaluate(f)
            | Command::Ablate(f) => f,
        }
    }

    fn section(&self) -> &'static str {
        match self {
            Command::GenData(_) => "corpus",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Evaluate(_) | Command::Ablate(_) => "eval",
        }
    }

    fn allowed(&self) -> &'static [&'static str] {
        match self {
            Command::GenData(_) => &["out"],
            Command::Train(_) => &["out", "corpus"],
            Command::Sample(_) => &["out", "corpus", "checkpoint", "strategy", "rate", "r", "s"],
            Command::Evaluate(_) => &["out", "corpus", "checkpoint", "strategy", "rate", "r", "s", "trials"],
            Command::Ablate(_) => &["out", "corpus", "checkpoint", "r", "s", "trials"],
        }
    }
}

/// Converts flags into a configuration patch.
pub fn flag_patch(command: &Command) -> Result<Value> {
    let f = command.flags();
    let given = [
        ("out", f.out.is_some()),
        ("corpus", f.corpus.is_some()),
        ("checkpoint", f.checkpoint.is_some()),
        ("strategy", f.strategy.is_some()),
        ("rate", f.rate.is_some()),
        ("r", f.r.is_some()),
        ("s", f.s.is_some()),
        ("trials", f.trials.is_some()),
    ];
    for (name, set) in given {
        if set && !command.allowed().contains(&name) {
            return Err(Error::Config(format!("--{name} is not used by {}", command.name())));
        }
    }
    let mut patch = Map::new();
    let mut put = |section: &str, key: &str, value: Value| {
        patch
            .entry(section.to_string())
            .or_insert_with(|| json!({}))
            .as_object_mut()
            .expect("section is an object")
            .insert(key.to_string(), value);
    };
    if let Some(seed) = f.seed {
        put(command.section(), "seed", json!(seed));
    }
    if let Some(r) = f.r {
        put("sample", "r", json!(r));
    }
    if let Some(s) = f.s {
        put("sample", "s", json!(s));
    }
    if let Some(t) = f.trials {
        put("eval", "trials", json!(t));
    }
    match command {
        Command::Sample(_) => {
            if let Some(s) = &f.strategy {
                put("sample", "strategy", json!(s));
            }
            if let Some(rate) = f.rate {
                put("sample", "keyframe_rate", json!(rate));
            }
            if let Some(c) = &f.checkpoint {
                put("sample", "checkpoint", json!(c));
            }
        }
        Command::Evaluate(_) => {
            if let Some(s) = &f.strategy {
                put("eval", "strategies", json!([s]));
            }
            if let Some(rate) = f.rate {
                put("eval", "keyframe_rate", json!(rate));
            }
        }
        _ => {}
    }
    Ok(Value::Object(patch))
}

fn required(path: &Option<PathBuf>, flag: &str, command: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("{command} needs {flag}")))
}

/// Runs a parsed command with an explicit environment.
pub fn execute(command: &Command, env: &BTreeMap<String, String>) -> Result<()> {
    let f = command.flags();
    let cfg = RunConfig::resolve(f.config.as_deref(), env, flag_patch(command)?)?;
    let name = command.name();
    let out = required(&f.out, "--out", name)?;
    match command {
        Command::GenData(_) => commands::gen_data(&cfg, &out),
        Command::Train(_) => commands::train(&cfg, &required(&f.corpus, "--corpus", name)?, &out),
        Command::Sample(_) => {
            let ckpt = cfg
                .sample
                .checkpoint
                .clone()
                .ok_or_else(|| Error::Config("sample needs --checkpoint".into()))?;
            commands::sample(&cfg, &ckpt, f.corpus.as_deref(), &out)
        }
        Command::Evaluate(_) => commands::evaluate(
            &cfg,
            &required(&f.checkpoint, "--checkpoint", name)?,
            &required(&f.corpus, "--corpus", name)?,
            &out,
        ),
        Command::Ablate(_) => commands::ablate_cmd(
            &cfg,
            &required(&f.checkpoint, "--checkpoint", name)?,
            &required(&f.corpus, "--corpus", name)?,
            &out,
        ),
    }
}

/// Parses arguments and runs. Help and version requests are returned as
/// `Ok(Some(text))`.
pub fn run<I, S>(args: I, env: &BTreeMap<String, String>) -> Result<Option<String>>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(Some(e.to_string())),
                _ => Err(Error::Config(
                    e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string(),
                )),
            };
        }
    };
    execute(&cli.command, env)?;
    Ok(None)
}

/// One-line machine-parsable error.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error category={}: {msg}", e.category())
}
