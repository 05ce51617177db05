//! Resolved per-command configuration: JSON file first, flags on top.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use orlc::data::SyntheticSpec;
use orlc::loss::ObjectMseNorm;
use orlc::proxy::ProxyConfig;
use orlc::train::{Objective, TrainConfig};

use crate::CliError;

/// Name of the echoed resolved configuration inside `--out`.
pub const RESOLVED_CONFIG: &str = "config.json";

pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

/// Writes `config` as pretty JSON to `<out>/config.json`.
pub fn echo<T: Serialize>(config: &T, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| orlc::Error::Io {
        path: out.to_owned(),
        source: e,
    })?;
    let path = out.join(RESOLVED_CONFIG);
    let json = serde_json::to_string_pretty(config).expect("configs serialize");
    std::fs::write(&path, json + "\n").map_err(|e| orlc::Error::Io { path, source: e })?;
    Ok(())
}

pub fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required --{flag} (flag or config file)")))
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

pub fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: orlc::Error| e.to_string())
}

pub fn parse_norm(s: &str) -> Result<ObjectMseNorm, String> {
    match s {
        "total-pixels" | "total" => Ok(ObjectMseNorm::TotalPixels),
        "object-pixels" | "object" => Ok(ObjectMseNorm::ObjectPixels),
        other => Err(format!("unknown normalization {other:?} (total-pixels|object-pixels)")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub out: Option<PathBuf>,
    pub dataset: SyntheticSpec,
    /// Image size must be divisible by `2^num_down_layers`.
    pub num_down_layers: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            out: None,
            dataset: SyntheticSpec::default(),
            num_down_layers: orlc::codec::ModelConfig::default().num_down_layers,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub out: Option<PathBuf>,
    /// Image-pair mode.
    pub reference: Option<PathBuf>,
    pub decoded: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    /// Dataset mode.
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: String,
    pub limit: Option<usize>,
    pub proxy: bool,
    pub proxy_config: ProxyConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            out: None,
            reference: None,
            decoded: None,
            mask: None,
            checkpoint: None,
            data: None,
            split: "val".into(),
            limit: None,
            proxy: false,
            proxy_config: ProxyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveSet {
    Human,
    Proposed,
    #[default]
    Both,
}

impl ObjectiveSet {
    pub fn objectives(self) -> Vec<Objective> {
        match self {
            ObjectiveSet::Human => vec![Objective::Human],
            ObjectiveSet::Proposed => vec![Objective::Proposed],
            ObjectiveSet::Both => vec![Objective::Proposed, Objective::Human],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdSweepConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub objective: ObjectiveSet,
    /// Overrides the objective's standard grid; single objective only.
    pub lambdas: Option<Vec<f64>>,
    /// Evaluate existing runs under this directory instead of training.
    pub checkpoints: Option<PathBuf>,
    pub train: TrainConfig,
    pub limit: Option<usize>,
    pub proxy: bool,
    pub proxy_config: ProxyConfig,
    pub finetune: ProxyConfig,
}

impl Default for RdSweepConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            objective: ObjectiveSet::Both,
            lambdas: None,
            checkpoints: None,
            train: TrainConfig::default(),
            limit: None,
            proxy: false,
            proxy_config: ProxyConfig::default(),
            finetune: ProxyConfig {
                steps: 300,
                learning_rate: 1e-3,
                ..ProxyConfig::default()
            },
        }
    }
}
