use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chord_core::backbones::{Architecture, BackboneConfig};
use chord_core::data::DataFormat;
use chord_core::saliency::SaliencyConfig;
use chord_core::sim::EvalConfig;
use chord_core::strategy::TieringConfig;
use chord_core::training::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub path: PathBuf,
    pub format: DataFormat,
    pub k_core: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "ml-100k".into(),
            path: PathBuf::from("data/ml-100k/u.data"),
            format: DataFormat::Ml100k,
            k_core: 10,
        }
    }
}

/// Whole experiment, as stored in the TOML config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Budgets swept by `simulate`, in average bits per weight.
    pub budgets: Vec<f64>,
    pub method: Method,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub saliency: SaliencyConfig,
    pub tiering: TieringConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            seeds: vec![0],
            budgets: vec![3.0, 2.5],
            method: Method::Chord,
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            saliency: SaliencyConfig::default(),
            tiering: TieringConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Lay `over` on top of `base`, recursing into tables.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
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

impl ExperimentConfig {
    /// Parse a config; backbone fields left out take the defaults of the
    /// chosen architecture.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        let arch = user
            .get("backbone")
            .and_then(|b| b.get("architecture"))
            .and_then(|a| a.as_str())
            .map(|a| a.parse::<Architecture>())
            .transpose()?
            .unwrap_or(Architecture::Sasrec);
        let mut base = toml::Value::try_from(Self::for_architecture(arch))?;
        merge(&mut base, user);
        let cfg: Self = base.try_into().context("invalid config")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn for_architecture(arch: Architecture) -> Self {
        let backbone = match arch {
            Architecture::Sasrec => BackboneConfig::sasrec(1),
            Architecture::Caser => BackboneConfig::caser(1),
        };
        Self {
            backbone,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(!self.seeds.is_empty(), "at least one seed is required");
        anyhow::ensure!(!self.budgets.is_empty(), "at least one budget is required");
        self.tiering.validate()?;
        self.train.validate()?;
        self.saliency.validate()?;
        for &b in &self.budgets {
            chord_core::strategy::ResourceProfile::new(0, b)?;
        }
        Ok(())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{}", seed))
    }
}
