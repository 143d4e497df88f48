//! Experiment configuration: one TOML file with every default
//! embedded in the binary; command line flags override file values.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// "building" or "inverter"
    pub task: String,
    pub seed: u64,
    /// Run length: control steps (building, 15 min each) or seconds
    /// (inverter).
    pub steps: usize,
    /// prof | cliponly | noupdate | pcontroller (building)
    /// prof | voltvar | linopt (inverter)
    pub controller: String,
    pub out_dir: String,
    pub horizon: usize,
    pub trace: TraceConfig,
    pub building: BuildingConfig,
    pub inverter: InverterConfig,
    pub ppo: PpoConfig,
    pub direct: DirectConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    /// "synth" or a path to a trace CSV
    pub source: String,
    pub synth_seed: u64,
    pub days: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BuildingConfig {
    pub gain: f64,
    pub setpoint: f64,
    /// Control steps between policy updates.
    pub update_every: usize,
    /// Separate trace seed for identification and pretraining.
    pub pretrain_seed: u64,
    pub pretrain_days: usize,
    /// 0 means "anneal over the whole run".
    pub sigma_anneal_steps: usize,
    /// Optional checkpoint to start from instead of pretraining.
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InverterConfig {
    pub feeder_seed: u64,
    /// Seconds between updates.
    pub update_every: usize,
    pub polygon_facets: usize,
    pub start_step: usize,
    pub train: bool,
    pub shared_inverter_weights: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub eps: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lambda_aux: f64,
    pub gae_lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DirectConfig {
    pub lr: f64,
    pub batches: usize,
    pub batch: usize,
    pub lambda_aux: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: "building".into(),
            seed: 0,
            steps: 96,
            controller: "prof".into(),
            out_dir: "out".into(),
            horizon: 12,
            trace: TraceConfig::default(),
            building: BuildingConfig::default(),
            inverter: InverterConfig::default(),
            ppo: PpoConfig::default(),
            direct: DirectConfig::default(),
        }
    }
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            source: "synth".into(),
            synth_seed: 3,
            days: 2,
        }
    }
}

impl Default for BuildingConfig {
    fn default() -> Self {
        BuildingConfig {
            gain: 40.0,
            setpoint: 22.5,
            update_every: 384,
            pretrain_seed: 4,
            pretrain_days: 3,
            sigma_anneal_steps: 0,
            checkpoint: String::new(),
        }
    }
}

impl Default for InverterConfig {
    fn default() -> Self {
        InverterConfig {
            feeder_seed: 42,
            update_every: 900,
            polygon_facets: 8,
            start_step: 0,
            train: true,
            shared_inverter_weights: false,
        }
    }
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.9,
            eps: 0.2,
            lr: 5e-4,
            epochs: 8,
            batch: 32,
            lambda_aux: 10.0,
            gae_lambda: 0.95,
        }
    }
}

impl Default for DirectConfig {
    fn default() -> Self {
        DirectConfig {
            lr: 1e-3,
            batches: 16,
            batch: 64,
            lambda_aux: 10.0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.task.as_str() {
            "building" => {
                if !["prof", "cliponly", "noupdate", "pcontroller"]
                    .contains(&self.controller.as_str())
                {
                    bail!("controller '{}' unknown for the building task", self.controller);
                }
            }
            "inverter" => {
                if !["prof", "voltvar", "linopt"].contains(&self.controller.as_str()) {
                    bail!("controller '{}' unknown for the inverter task", self.controller);
                }
            }
            other => bail!("task '{other}' must be 'building' or 'inverter'"),
        }
        if self.steps == 0 {
            bail!("steps must be positive");
        }
        if self.horizon == 0 || self.horizon > 96 {
            bail!("horizon {} outside (0, 96]", self.horizon);
        }
        if !(0.0..1.0).contains(&self.ppo.gamma) {
            bail!("ppo.gamma {} outside [0, 1)", self.ppo.gamma);
        }
        if !(0.0..1.0).contains(&self.ppo.eps) {
            bail!("ppo.eps {} outside (0, 1)", self.ppo.eps);
        }
        if self.ppo.lr <= 0.0 || self.direct.lr <= 0.0 {
            bail!("learning rates must be positive");
        }
        if self.inverter.polygon_facets < 4 {
            bail!("polygon_facets must be at least 4");
        }
        if self.trace.source != "synth" && !Path::new(&self.trace.source).exists() {
            bail!("trace file '{}' does not exist", self.trace.source);
        }
        if !self.building.checkpoint.is_empty()
            && !Path::new(&self.building.checkpoint).exists()
        {
            bail!("checkpoint '{}' does not exist", self.building.checkpoint);
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the effective configuration, recorded in every output.
    /// The output directory does not change the experiment, so it is
    /// excluded.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = String::new();
        let mut h = Sha256::new();
        h.update(canon.to_toml().as_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn bad_controller_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.controller = "voltvar".into(); // feeder controller on building task
        assert!(cfg.validate().is_err());
    }
}
