//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::Context;
use faithful_core::analysis::{AblationAxes, PERTURBATION_RANGES};
use faithful_core::curation::CurationPolicy;
use faithful_core::synth::WorldConfig;
use faithful_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "FAITHFUL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Top-k size for activation statistics.
    pub k: usize,
    pub activation_identities: usize,
    pub activation_poses: usize,
    pub projection_identities: usize,
    pub projection_poses: usize,
    pub perturb_ranges: Vec<f64>,
    pub ablation: AblationAxes,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            k: 10,
            activation_identities: 40,
            activation_poses: 10,
            projection_identities: 7,
            projection_poses: 8,
            perturb_ranges: PERTURBATION_RANGES.to_vec(),
            ablation: AblationAxes::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Takes precedence over `train.seed` and the environment fallback.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub world: WorldConfig,
    pub curation: CurationPolicy,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("out"),
            train: TrainConfig::default(),
            world: WorldConfig::default(),
            curation: CurationPolicy::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.world.validate()?;
        self.curation.validate()?;
        self.analysis.ablation.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Flag,
    Config,
    Env,
    Default,
}

/// Flag, then config `seed`, then `FAITHFUL_SEED`, then `train.seed`.
pub fn resolve_seed(flag: Option<u64>, cfg: Option<&RunConfig>) -> anyhow::Result<(u64, SeedSource)> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    if let Some(s) = cfg.and_then(|c| c.seed) {
        return Ok((s, SeedSource::Config));
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        let s = v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
        return Ok((s, SeedSource::Env));
    }
    Ok((cfg.map_or(0, |c| c.train.seed), SeedSource::Default))
}

/// One flag that replaced a config value, recorded in the run metadata.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Override {
    pub key: String,
    pub value: serde_json::Value,
}

#[derive(Debug, Default)]
pub struct Overrides(pub Vec<Override>);

impl Overrides {
    pub fn apply<T: Serialize>(&mut self, key: &str, flag: Option<T>, target: &mut T) {
        if let Some(v) = flag {
            self.0.push(Override { key: key.to_string(), value: serde_json::to_value(&v).expect("plain values serialize") });
            *target = v;
        }
    }
}
