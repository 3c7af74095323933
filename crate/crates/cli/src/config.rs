use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use splatode::forecaster::Variant;
use splatode::pipeline::ExperimentConfig;

use crate::UsageError;

/// Environment variable consulted when no `--seed` flag is given.
pub const SEED_ENV: &str = "ODEGS_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CliVariant {
    Deterministic,
    Variational,
    Autoregressive,
    TimestampBaseline,
}

impl CliVariant {
    /// The forecaster variant, or `None` for the timestamp-conditioned baseline.
    pub fn model(self) -> Option<Variant> {
        match self {
            CliVariant::Deterministic => Some(Variant::Deterministic),
            CliVariant::Variational => Some(Variant::Variational),
            CliVariant::Autoregressive => Some(Variant::Autoregressive),
            CliVariant::TimestampBaseline => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CliVariant::Deterministic => "deterministic",
            CliVariant::Variational => "variational",
            CliVariant::Autoregressive => "autoregressive",
            CliVariant::TimestampBaseline => "timestamp-baseline",
        }
    }
}

/// One JSON document holding paths, seed, variant and every stage config.
/// Stage fields sit at the top level next to the run fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: CliVariant,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene_path: None,
            out_dir: None,
            seed: None,
            variant: CliVariant::Deterministic,
            experiment: ExperimentConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        if !path.exists() {
            return Err(splatode::Error::MissingArtifact(path.to_path_buf()).into());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let invalid = |e: serde_json::Error| UsageError(format!("invalid config {}: {e}", path.display()));
        let file: serde_json::Value = serde_json::from_str(&text).map_err(invalid)?;
        // Fields absent from the file keep the CLI defaults, at any depth.
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, file);
        Ok(serde_json::from_value(merged).map_err(invalid)?)
    }

    /// Seed precedence: flag, then environment, then file, then zero. The
    /// resolved seed is pushed into every stage.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> anyhow::Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| UsageError(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?,
            ),
            _ => None,
        };
        let seed = flag.or(env).or(self.seed).unwrap_or(0);
        self.seed = Some(seed);
        self.experiment = self.experiment.clone().with_seed(seed);
        Ok(seed)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// First non-`None` of flag and file value, or a usage error naming the flag.
pub fn require_path(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| UsageError(format!("--{name} is required (flag or config field)")).into())
}
