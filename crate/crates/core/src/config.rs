//! The run configuration: every module's settings in one JSON document.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dpl::DplConfig;
use crate::env::{DriversConfig, EnvConfig, LayoutConfig, SocialConfig};
use crate::error::{config_err, Result};
use crate::policy::PolicyConfig;
use crate::ppo::PpoConfig;

/// Settings of the reproduction harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset_episodes: usize,
    /// Decision steps per dataset episode.
    pub dataset_steps: usize,
    /// Seeds per arm or per φ; run seeds are `seed, seed + 1, …`.
    pub seeds: usize,
    /// Coordination tendencies of the sweep.
    pub phis: Vec<f64>,
    pub eval_episodes: usize,
    /// First evaluation episode seed; every run is evaluated on the same episodes.
    pub eval_seed: u64,
    /// Trailing moving average for displayed curves.
    pub smoothing: bool,
    pub smoothing_window: usize,
    /// Worker threads for sweep and ablation runs; 0 uses the available cores.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_episodes: 500,
            dataset_steps: 60,
            seeds: 3,
            phis: (0..=6).map(|k| k as f64 * PI / 12.0).collect(),
            eval_episodes: 50,
            eval_seed: 1_000_000,
            smoothing: false,
            smoothing_window: 10,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |f: &str, m: &str| Err((f.to_string(), m.to_string()));
        if self.dataset_episodes == 0 {
            return err("dataset_episodes", "must be at least 1");
        }
        if self.seeds == 0 {
            return err("seeds", "must be at least 1");
        }
        if self.smoothing_window == 0 {
            return err("smoothing_window", "must be at least 1");
        }
        if let Some(p) = self.phis.iter().find(|p| !(0.0..=PI / 2.0 + 1e-12).contains(*p)) {
            return Err(("phis".into(), format!("{p} outside [0, pi/2]")));
        }
        Ok(())
    }

    pub fn seed_list(&self, base: u64) -> Vec<u64> {
        (0..self.seeds as u64).map(|k| base + k).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub layout: LayoutConfig,
    pub drivers: DriversConfig,
    pub env: EnvConfig,
    pub dpl: DplConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    pub social: SocialConfig,
    pub experiment: ExperimentConfig,
}

fn from_value(v: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        config_err(if path == "." { String::new() } else { path }, e.into_inner().to_string())
    })
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn at(section: &str, (field, msg): (String, String)) -> crate::Error {
    config_err(format!("{section}.{field}"), msg)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| config_err("", e.to_string()))?;
        from_value(v)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `section.key=value` overrides. Values are JSON when they parse
    /// as JSON, strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for s in sets {
            let s = s.as_ref();
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| config_err(s, "override must look like section.key=value"))?;
            let parts: Vec<&str> = key.split('.').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(config_err(key, "empty path segment"));
            }
            let (last, parents) = parts.split_last().expect("split yields one part");
            let mut node = &mut root;
            for p in parents {
                node = node
                    .get_mut(*p)
                    .filter(|n| n.is_object())
                    .ok_or_else(|| config_err(key, format!("unknown section `{p}`")))?;
            }
            let obj = node.as_object_mut().expect("checked object");
            if !obj.contains_key(*last) {
                return Err(config_err(key, "unknown key"));
            }
            obj.insert(last.to_string(), parse_value(raw));
        }
        from_value(root)
    }

    /// Range checks, reported with the offending field path.
    pub fn validate(&self) -> Result<()> {
        self.layout.validate().map_err(|m| config_err("layout", m))?;
        self.drivers.validate().map_err(|e| at("drivers", e))?;
        self.env.validate().map_err(|e| at("env", e))?;
        self.dpl.validate().map_err(|e| at("dpl", e))?;
        self.policy.validate().map_err(|e| at("policy", e))?;
        self.ppo.validate().map_err(|e| at("ppo", e))?;
        self.social.validate().map_err(|m| config_err("social", m))?;
        self.experiment.validate().map_err(|e| at("experiment", e))?;
        if self.policy.prior_dim != 0 && self.policy.prior_dim != self.dpl.latent_dim {
            return Err(config_err(
                "policy.prior_dim",
                format!("must be 0 or dpl.latent_dim ({})", self.dpl.latent_dim),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
