//! `vds-lab`: train, evaluate and ablate curriculum runs from JSON configs.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use vds_core::approximator::gradcheck::{self, Tolerance};
use vds_core::ddpg::Agent;
use vds_core::seeds::stream_rng;
use vds_core::trainer::{evaluate, Heatmap, TrainConfig, Trainer};
use vds_core::vds::{FKind, QEnsemble, SamplerMode};
use vds_core::Maze;

pub const THREADS_ENV: &str = "VDS_LAB_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Malformed {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("config must be a JSON object")]
    NotObject,
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Debug, Parser)]
#[command(name = "vds-lab", version, about = "Value-disagreement goal curricula on continuous mazes")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `sampler.K=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Serial updates and wall-clock-free metrics.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// identity, exp, tanh, square
    #[value(name = "f_kind")]
    FKind,
    /// Ensemble sizes (default 3, 5, 10).
    #[value(name = "K")]
    K,
    /// vds+her, her, vds, plain
    #[value(name = "her")]
    Her,
    /// uniform, vds, ucb
    #[value(name = "mode")]
    Mode,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Run the training loop and write metrics, heatmaps and checkpoints.
    Train(Common),
    /// Success rate of the checkpointed policy on uniformly drawn goals.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (default: <out>/ckpt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
    },
    /// Write the three heatmap grids for a checkpoint.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Finite-difference check of backpropagation on random networks.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        networks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one training job per arm of an ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated arm values overriding the axis defaults.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(base), Value::Object(patch)) = (base, patch) else {
        return Err(ConfigError::NotObject);
    };
    for (key, value) in patch {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let slot = base.get_mut(&key).ok_or_else(|| ConfigError::UnknownKey(path.clone()))?;
        if slot.is_object() && value.is_object() {
            merge(slot, value, &path)?;
        } else {
            *slot = value;
        }
    }
    Ok(())
}

fn apply_override(config: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::BadOverride(spec.into()));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
    let mut slot = config;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    }
    *slot = value;
    Ok(())
}

/// Defaults, then the file's values, then overrides, then range validation.
pub fn resolve_config(file: Option<Value>, overrides: &[String]) -> Result<TrainConfig, ConfigError> {
    let mut value = serde_json::to_value(TrainConfig::default()).expect("defaults serialize");
    if let Some(file) = file {
        merge(&mut value, file, "")?;
    }
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let config: TrainConfig = serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Invalid {
        key: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    config.validate().map_err(|e| match e {
        vds_core::trainer::TrainError::Config { key, message } => ConfigError::Invalid { key, message },
        other => ConfigError::Invalid {
            key: String::new(),
            message: other.to_string(),
        },
    })?;
    Ok(config)
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<TrainConfig, ConfigError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: display.clone(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|source| ConfigError::Malformed { path: display, source })?;
    if !value.is_object() {
        return Err(ConfigError::NotObject);
    }
    resolve_config(Some(value), overrides)
}

fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n >= 1)
}

fn load_common(common: &Common) -> anyhow::Result<TrainConfig> {
    let Some(path) = &common.config else {
        bail!(UsageError("--config <path> is required"));
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if common.deterministic {
        overrides.push("deterministic=true".into());
    }
    let mut config = parse_config(path, &overrides)?;
    if let Some(out) = &common.out {
        config.out_dir = Some(out.clone());
    }
    if let Some(n) = threads_from_env() {
        config.threads = n;
    }
    Ok(config)
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(&'static str);

fn out_dir(config: &TrainConfig) -> anyhow::Result<PathBuf> {
    config
        .out_dir
        .clone()
        .ok_or_else(|| UsageError("an output directory is required (--out or out_dir)").into())
}

fn train(config: TrainConfig) -> anyhow::Result<()> {
    let mut trainer = Trainer::new(config)?;
    let summary = trainer.run_with(|r| {
        println!(
            "epoch {:>4}  steps {:>8}  success {:.3}  mean_delta {:.4}",
            r.epoch, r.env_steps, r.success, r.mean_delta
        );
        ControlFlow::Continue(())
    })?;
    if let Some(r) = summary.final_report() {
        println!("final success {:.3} after {} steps", r.success, r.env_steps);
    }
    Ok(())
}

fn run_evaluate(config: TrainConfig, ckpt: Option<PathBuf>, episodes: usize) -> anyhow::Result<()> {
    if episodes == 0 {
        bail!(UsageError("--episodes must be at least 1"));
    }
    let ckpt = match ckpt {
        Some(p) => p,
        None => out_dir(&config)?.join("ckpt"),
    };
    let maze = Maze::load(&config.env)?;
    let agent = Agent::load(&ckpt.join("agent")).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut rng = stream_rng(config.seed, 0xE7A1);
    let success = evaluate(&agent, &maze, episodes, &mut rng);
    println!("success {success:.4} over {episodes} goals");
    Ok(())
}

fn run_heatmap(config: TrainConfig, ckpt: Option<PathBuf>, resolution: Option<usize>) -> anyhow::Result<()> {
    let out = out_dir(&config)?;
    let ckpt = ckpt.unwrap_or_else(|| out.join("ckpt"));
    let maze = Maze::load(&config.env)?;
    let agent = Agent::load(&ckpt.join("agent")).with_context(|| format!("loading {}", ckpt.display()))?;
    let ensemble = QEnsemble::load(&ckpt.join("ensemble"), config.seed)?;
    let res = resolution.unwrap_or(config.heatmap_resolution);
    Heatmap::compute(&agent, &ensemble, &maze, res, config.sampler.f_kind)?.write(&out)?;
    println!("heatmaps written to {}", out.display());
    Ok(())
}

fn run_gradcheck(networks: usize, seed: u64) -> anyhow::Result<bool> {
    let report = gradcheck::run_suite(networks, seed, Tolerance::default())?;
    println!(
        "{} networks, {} parameters, {} failures, worst relative error {:.3e}",
        report.networks, report.parameters_checked, report.failures, report.worst_relative_error
    );
    Ok(report.passed())
}

/// `(arm name, overrides)` for each arm of `axis`.
pub fn ablation_arms(axis: Axis, values: &[String]) -> anyhow::Result<Vec<(String, Vec<String>)>> {
    let pick = |defaults: &[&str]| -> Vec<String> {
        if values.is_empty() {
            defaults.iter().map(|s| s.to_string()).collect()
        } else {
            values.to_vec()
        }
    };
    let arms = match axis {
        Axis::FKind => pick(&["identity", "exp", "tanh", "square"])
            .into_iter()
            .map(|v| {
                v.parse::<FKind>().map_err(anyhow::Error::msg)?;
                Ok((format!("f_{v}"), vec![format!("sampler.f_kind={v}")]))
            })
            .collect::<anyhow::Result<_>>()?,
        Axis::K => pick(&["3", "5", "10"])
            .into_iter()
            .map(|v| {
                let k: usize = v.parse().with_context(|| format!("ensemble size `{v}`"))?;
                Ok((format!("K_{k}"), vec![format!("sampler.K={k}")]))
            })
            .collect::<anyhow::Result<_>>()?,
        Axis::Her => pick(&["vds+her", "her", "vds", "plain"])
            .into_iter()
            .map(|v| {
                let (mode, her) = match v.as_str() {
                    "vds+her" => ("vds", true),
                    "her" => ("uniform", true),
                    "vds" => ("vds", false),
                    "plain" => ("uniform", false),
                    other => bail!("unknown arm `{other}` (expected vds+her, her, vds, plain)"),
                };
                let name = v.replace('+', "_");
                Ok((name, vec![format!("sampler.mode={mode}"), format!("her.enabled={her}")]))
            })
            .collect::<anyhow::Result<_>>()?,
        Axis::Mode => pick(&["uniform", "vds", "ucb"])
            .into_iter()
            .map(|v| {
                serde_json::from_value::<SamplerMode>(Value::String(v.clone()))
                    .with_context(|| format!("sampler mode `{v}`"))?;
                Ok((format!("mode_{v}"), vec![format!("sampler.mode={v}")]))
            })
            .collect::<anyhow::Result<_>>()?,
    };
    Ok(arms)
}

fn run_ablate(common: &Common, axis: Axis, values: &[String]) -> anyhow::Result<()> {
    let base = load_common(common)?;
    let root = out_dir(&base)?;
    fs::create_dir_all(&root).with_context(|| root.display().to_string())?;
    let mut summary = String::from("arm,final_success,env_steps\n");
    let template = serde_json::to_value(&base)?;
    for (name, overrides) in ablation_arms(axis, values)? {
        let mut config = resolve_config(Some(template.clone()), &overrides)?;
        config.out_dir = Some(root.join(&name));
        println!("== arm {name}");
        let summary_run = Trainer::new(config)?.run()?;
        let last = summary_run.final_report().expect("at least one epoch");
        summary.push_str(&format!("{name},{:.6},{}\n", last.success, last.env_steps));
    }
    let path = root.join("ablation.csv");
    fs::write(&path, summary).with_context(|| path.display().to_string())?;
    Ok(())
}

/// Dispatches a parsed command; `Ok(false)` means a validation suite failed.
pub fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.verb {
        Verb::Train(common) => train(load_common(&common)?).map(|_| true),
        Verb::Evaluate { common, ckpt, episodes } => run_evaluate(load_common(&common)?, ckpt, episodes).map(|_| true),
        Verb::Heatmap {
            common,
            ckpt,
            resolution,
        } => run_heatmap(load_common(&common)?, ckpt, resolution).map(|_| true),
        Verb::Gradcheck { networks, seed } => run_gradcheck(networks, seed),
        Verb::Ablate { common, axis, values } => run_ablate(&common, axis, &values).map(|_| true),
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("validation suite failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            let mut err = std::io::stderr().lock();
            let _ = writeln!(err, "error: {e:#}");
            if e.is::<UsageError>() {
                let _ = writeln!(err, "usage: vds-lab <train|evaluate|heatmap|gradcheck|ablate> --config <path> [--set key=value]... [--out dir] [--seed n] [--deterministic]");
                return ExitCode::from(2);
            }
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_names_nested_unknown_key() {
        let file = serde_json::json!({"agent": {"explore": {"epsilon": 0.1}}});
        match resolve_config(Some(file), &[]) {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "agent.explore.epsilon"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn override_parses_json_then_falls_back_to_string() {
        let c = resolve_config(None, &["sampler.f_kind=square".into(), "her.enabled=false".into()]).unwrap();
        assert_eq!(c.sampler.f_kind, FKind::Square);
        assert!(!c.her.enabled);
    }

    #[test]
    fn type_error_names_key() {
        match resolve_config(None, &["schedule.n_epochs=many".into()]) {
            Err(ConfigError::Invalid { key, .. }) => assert_eq!(key, "schedule.n_epochs"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_map_is_object() {
        assert!(resolve_config(Some(Value::Object(serde_json::Map::new())), &[]).is_ok());
    }
}
