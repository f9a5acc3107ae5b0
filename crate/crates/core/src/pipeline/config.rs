//! JSON run configuration with `env`, `oracle`, `net` and `trainer` sections.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::env::EpisodeConfig;
use crate::oracle::{Oracle, OracleHandle, SyntheticOracleParams};
use crate::qnet::NetConfig;
use crate::rl::TrainerConfig;

/// Overrides `trainer.seed` when set.
pub const SEED_VAR: &str = "BOXFORGE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Ensemble members: `synthetic`, `stdio:CMD` or `tcp:HOST:PORT`.
    pub endpoints: Vec<String>,
    pub alpha: f64,
    pub drop_threshold: f64,
    pub noise_amp: f64,
    /// Per-request deadline for external recognizers.
    pub timeout_ms: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        let p = SyntheticOracleParams::default();
        Self {
            endpoints: vec!["synthetic".into()],
            alpha: p.alpha,
            drop_threshold: p.drop_threshold,
            noise_amp: p.noise_amp,
            timeout_ms: 5_000,
        }
    }
}

impl OracleConfig {
    pub fn synthetic_params(&self) -> SyntheticOracleParams {
        SyntheticOracleParams {
            alpha: self.alpha,
            drop_threshold: self.drop_threshold,
            noise_amp: self.noise_amp,
        }
    }

    /// Opens every endpoint.
    pub fn build(&self) -> Result<Oracle> {
        let timeout = Duration::from_millis(self.timeout_ms);
        let members = self
            .endpoints
            .iter()
            .map(|e| OracleHandle::open(e, self.synthetic_params(), timeout))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Oracle::new(members)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EpisodeConfig,
    pub oracle: OracleConfig,
    pub net: NetConfig,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    /// Parses and validates; missing sections and fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.env.validate().map_err(|e| cfg(&e))?;
        self.net.validate().map_err(|e| cfg(&e))?;
        self.trainer.validate().map_err(|e| cfg(&e))?;
        if self.oracle.endpoints.is_empty() {
            return Err(cfg(&"oracle.endpoints must not be empty"));
        }
        self.oracle.synthetic_params().validate().map_err(|e| cfg(&e))?;
        Ok(())
    }

    /// Applies `BOXFORGE_SEED` from the process environment.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        self.apply_seed_override(std::env::var(SEED_VAR).ok().as_deref())
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.trainer.seed = v
                .trim()
                .parse()
                .map_err(|_| PipelineError::Config(format!("{SEED_VAR}={v:?} is not a 64-bit integer")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
