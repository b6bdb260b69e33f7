//! Run configuration: one TOML file with `data`, `train`, `eval` and
//! `ablate` tables. Missing keys take the desk-scale defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use ucorr_core::metrics::EvalOptions;
use ucorr_core::synth::SceneConfig;
use ucorr_core::train::TrainConfig;
use ucorr_core::{CorrConfig, ModelConfig, Variant};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the whole dataset; flight scenes derive from it.
    pub seed: u64,
    pub train_flights: usize,
    pub val_flights: usize,
    pub test_flights: usize,
    pub frames_per_flight: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_flights: 30,
            val_flights: 5,
            test_flights: 5,
            frames_per_flight: 10,
            scene: SceneConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn flights(&self, split: &str) -> usize {
        match split {
            "train" => self.train_flights,
            "val" => self.val_flights,
            "test" => self.test_flights,
            _ => 0,
        }
    }

    pub fn total_flights(&self) -> usize {
        self.train_flights + self.val_flights + self.test_flights
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    /// Split every variant is evaluated on.
    pub split: String,
    /// Frames per sample. All variants see the same samples; two-frame
    /// models use the newest two.
    pub window: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            split: "test".into(),
            window: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub ablate: AblateConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    /// 64x64 scenes, small model, a few epochs.
    pub fn desk() -> Self {
        let data = DataConfig::default();
        let model = ModelConfig {
            base_channels: 8,
            corr: CorrConfig::with_displacement(4),
            input_size: [data.scene.height, data.scene.width],
            ..ModelConfig::default()
        };
        Config {
            data,
            train: TrainConfig {
                epochs: 3,
                model,
                ..TrainConfig::default()
            },
            eval: EvalOptions::default(),
            ablate: AblateConfig::default(),
        }
    }

    /// Full-resolution profile: 848x480 frames, displacement 10, 15 epochs.
    pub fn full() -> Self {
        let mut cfg = Self::desk();
        cfg.data.scene.width = 848;
        cfg.data.scene.height = 480;
        cfg.data.train_flights = 300;
        cfg.data.val_flights = 40;
        cfg.data.test_flights = 40;
        cfg.train.epochs = 15;
        cfg.train.model = ModelConfig {
            base_channels: 16,
            corr: CorrConfig::with_displacement(10),
            input_size: [480, 848],
            ..ModelConfig::default()
        };
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => bail!("unknown preset `{name}` (expected desk or full)"),
        }
    }

    /// Parses TOML text; every key absent from `text` keeps its value from
    /// `base`, at any nesting depth.
    pub fn parse_over(base: &Config, text: &str) -> Result<Self> {
        let file: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(base)?;
        merge(&mut merged, file.clone());
        let cfg: Config = merged.try_into()?;
        let known = toml::Table::try_from(&cfg)?;
        if let Some(key) = unknown_key(&file, &known, "") {
            bail!("unknown config key `{key}`");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(&Self::desk(), text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Config file when given, desk defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::desk()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        if self.data.frames_per_flight < 2 {
            bail!("frames_per_flight must be at least 2");
        }
        if self.data.total_flights() == 0 {
            bail!("dataset needs at least one flight");
        }
        self.train.validate()?;
        if !SPLITS.contains(&self.ablate.split.as_str()) {
            bail!("ablate.split must be one of {SPLITS:?}");
        }
        let need = self.ablate.variants.iter().map(|v| v.arity()).max().unwrap_or(1);
        if self.ablate.window < need {
            bail!("ablate.window {} is smaller than the largest variant arity {need}", self.ablate.window);
        }
        Ok(())
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn unknown_key(file: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in file {
        let path = format!("{prefix}{k}");
        match (known.get(k), v) {
            (None, _) => return Some(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(ft)) => {
                if let Some(bad) = unknown_key(ft, kt, &format!("{path}.")) {
                    return Some(bad);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for cfg in [Config::desk(), Config::full()] {
            cfg.validate().unwrap();
            let back: Config = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = Config::parse("[train]\nepochs = 7\n[train.model]\nbase_channels = 4\n[data]\nseed = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.model.base_channels, 4);
        assert_eq!(cfg.train.model.corr, Config::desk().train.model.corr);
        assert_eq!(cfg.data.seed, 3);
        assert_eq!(cfg.data.train_flights, 30);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::parse("[data]\nflights = 3\n").is_err());
        assert!(Config::parse("[train.model]\nwidth = 3\n").is_err());
        assert!(Config::parse("[train]\nepochs = -1\n").is_err());
    }
}
