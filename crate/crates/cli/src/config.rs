//! Run configuration: one TOML file, overridden field by field by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ringflow_core::evaluation::{SymmetryMode, DEFAULT_DELTA};
use ringflow_core::{ModelConfig, PriorSpec, SampleConfig, TrainConfig};
use serde::Deserialize;

use crate::UsageError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub delta: f64,
    pub symmetry: SymmetryMode,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            delta: DEFAULT_DELTA,
            symmetry: SymmetryMode::Identity,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the seeds of training, sampling and splitting when set.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    /// Shared by training and sampling; `[train.prior]` and `[sample.prior]` are rejected.
    pub prior: PriorSpec,
    pub metrics: MetricOptions,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| UsageError(format!("config: {e}")))?;
        if cfg.train.prior != PriorSpec::default() || cfg.sample.prior != PriorSpec::default() {
            bail!(UsageError("config: set the prior in [prior], not under [train] or [sample]".into()));
        }
        cfg.train.prior = cfg.prior;
        cfg.sample.prior = cfg.prior;
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
            cfg.sample.seed = seed;
        }
        for p in [
            &mut cfg.paths.dataset,
            &mut cfg.paths.split,
            &mut cfg.paths.table,
            &mut cfg.paths.checkpoint,
            &mut cfg.paths.samples,
            &mut cfg.paths.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.model.validate().map_err(|e| UsageError(format!("config [model]: {e}")))?;
        cfg.train.validate().map_err(|e| UsageError(format!("config [train]: {e}")))?;
        cfg.prior.validate().map_err(|e| UsageError(format!("config [prior]: {e}")))?;
        if !(cfg.metrics.delta > 0.0) {
            bail!(UsageError("config [metrics]: delta must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| UsageError(format!("{e:#}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }
}

/// The flag value if given, else the configured one; an input path must exist.
pub fn input_path(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    let path = flag
        .clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| UsageError(format!("no {what} given (flag or [paths] entry)")))?;
    if !path.exists() {
        bail!(UsageError(format!("{what} {} does not exist", path.display())));
    }
    Ok(path)
}

pub fn output_path(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| UsageError(format!("no {what} given (flag or [paths] entry)")).into())
}
