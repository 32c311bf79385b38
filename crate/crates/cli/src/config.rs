//! Run configuration: built-in presets, TOML files and flag overrides.

use std::fs;
use std::path::Path;

use pnde_core::models::FieldKind;
use pnde_core::systems::SystemConfig;
use pnde_core::training::{AdamW, TrainConfig};
use pnde_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// States per training and validation trajectory.
    pub steps: usize,
    /// States per test trajectory; the last one is the prediction horizon.
    pub test_steps: usize,
    pub dt: f64,
    #[serde(default = "default_data_tol")]
    pub tolerance: f64,
}

fn default_data_tol() -> f64 {
    1e-10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamW,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_tol")]
    pub tolerance: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    /// Compute pendulum errors on Cartesian positions and velocities even
    /// when the model works in angles.
    #[serde(default)]
    pub cartesian_metrics: bool,
}

fn default_eval_tol() -> f64 {
    1e-6
}

fn default_max_steps() -> u64 {
    100_000
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance: default_eval_tol(),
            max_steps: default_max_steps(),
            cartesian_metrics: false,
        }
    }
}

/// Acceptance thresholds checked by `repro`. Absent entries are skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    /// PNDE constraint MSE must be this many times below SNDE(γ=1)'s.
    pub pnde_snde_gap: Option<f64>,
    /// Final-time SNDE constraint MSE must drop by this factor per decade of γ.
    pub snde_decade_factor: Option<f64>,
    /// SNDE(γ=100) median f_evals must be this many times PNDE's.
    pub stiffness_ratio: Option<f64>,
    /// Upper bound on PNDE's largest `‖g‖∞`.
    pub pnde_max_drift: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub system: SystemConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    pub roster: Vec<FieldKind>,
    #[serde(default)]
    pub checks: Checks,
}

const PRESETS: &[(&str, &str)] = &[
    ("pendulum2-desk", include_str!("../presets/pendulum2-desk.toml")),
    ("grid-desk", include_str!("../presets/grid-desk.toml")),
    ("fput8-desk", include_str!("../presets/fput8-desk.toml")),
    ("pendulum3-cartesian", include_str!("../presets/pendulum3-cartesian.toml")),
    ("pendulum3-generalized", include_str!("../presets/pendulum3-generalized.toml")),
    ("fput128-paper", include_str!("../presets/fput128-paper.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let Some((_, text)) = PRESETS.iter().find(|(n, _)| *n == name) else {
        return Err(Error::Config(format!(
            "unknown preset '{name}'; available: {}",
            preset_names().join(", ")
        )));
    };
    RunConfig::parse(text)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.train == 0 || d.valid == 0 || d.test == 0 {
            return Err(Error::Config("every split needs at least one trajectory".into()));
        }
        if d.steps < 4 || d.test_steps < 2 {
            return Err(Error::Config("trajectories need at least 4 states".into()));
        }
        if !(d.dt > 0.0 && d.tolerance > 0.0 && self.eval.tolerance > 0.0) {
            return Err(Error::Config("dt and tolerances must be positive".into()));
        }
        if self.roster.is_empty() {
            return Err(Error::Config("roster is empty".into()));
        }
        let mut labels: Vec<String> = self.roster.iter().map(model_id).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.roster.len() {
            return Err(Error::Config("roster lists a model twice".into()));
        }
        for k in &self.roster {
            if let FieldKind::Snde { gamma } = k {
                if !(*gamma >= 0.0 && gamma.is_finite()) {
                    return Err(Error::Config(format!("gamma must be non-negative, got {gamma}")));
                }
            }
        }
        self.train_config(FieldKind::Nde).validate()?;
        Ok(())
    }

    pub fn train_config(&self, kind: FieldKind) -> TrainConfig {
        TrainConfig {
            kind,
            hidden: self.train.hidden.clone(),
            pretrain_epochs: self.train.pretrain_epochs,
            finetune_epochs: self.train.finetune_epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            optimizer: self.train.optimizer,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// File-system friendly model name, e.g. `snde_g0.1`.
pub fn model_id(kind: &FieldKind) -> String {
    match kind {
        FieldKind::Nde => "nde".into(),
        FieldKind::Snde { gamma } => format!("snde_g{gamma}"),
        FieldKind::Pnde => "pnde".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_round_trip() {
        for name in preset_names() {
            let cfg = preset(name).unwrap();
            let again = RunConfig::parse(&cfg.to_toml()).unwrap();
            assert_eq!(again, cfg, "{name}");
            assert_eq!(again.hash(), cfg.hash());
        }
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn validation_rejects_bad_rosters() {
        let mut cfg = preset("pendulum2-desk").unwrap();
        cfg.roster.push(cfg.roster[0]);
        assert!(cfg.validate().is_err());
        cfg.roster = vec![FieldKind::Snde { gamma: -1.0 }];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_ids() {
        assert_eq!(model_id(&FieldKind::Snde { gamma: 0.1 }), "snde_g0.1");
        assert_eq!(model_id(&FieldKind::Snde { gamma: 100.0 }), "snde_g100");
    }
}
