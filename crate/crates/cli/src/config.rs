//! Run configuration: presets, `key=value` files and flag overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mcm_core::model::ModelConfig;
use mcm_core::trainer::{pairs_text, parse_pairs, TrainConfig};
use mcm_core::{Error, Result};

/// Keys that are neither model nor training settings.
pub const RUN_KEYS: &[&str] = &["data", "images", "attributes", "concept_names", "bank", "bank_seed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Tiny,
    Small,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Small => ModelConfig::small(4),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Tiny => TrainConfig::tiny(),
            Preset::Small => TrainConfig::small(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub images: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub concept_names: Option<Vec<String>>,
    pub bank: Option<PathBuf>,
    pub bank_seed: u64,
}

impl RunConfig {
    /// Preset values, overridden by the file, overridden by `overrides`.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in preset.model().to_pairs().into_iter().chain(preset.train().to_pairs()) {
            if k != "dec_layers" {
                map.insert(k.to_string(), v);
            }
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let pairs = parse_pairs(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            map.extend(pairs);
        }
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let model_keys: Vec<&str> = ModelConfig::tiny().to_pairs().into_iter().map(|(k, _)| k).collect();
        let train_keys: Vec<&str> = TrainConfig::tiny().to_pairs().into_iter().map(|(k, _)| k).collect();
        let unknown: Vec<&str> = map
            .keys()
            .map(String::as_str)
            .filter(|k| !model_keys.contains(k) && !train_keys.contains(k) && !RUN_KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown configuration keys: {}",
                unknown.join(", ")
            )));
        }
        let model = ModelConfig::from_pairs(map)?;
        model.validate()?;
        let mut train = TrainConfig::tiny();
        train.apply_pairs(map)?;
        train.validate()?;
        let data = map.get("data").map(PathBuf::from);
        let path = |key: &str, default: &str| {
            map.get(key)
                .map(PathBuf::from)
                .or_else(|| data.as_ref().map(|d| d.join(default)))
        };
        let bank_seed = match map.get("bank_seed") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for bank_seed")))?,
            None => 0,
        };
        let concept_names = map.get("concept_names").map(|v| split_list(v));
        if concept_names.as_ref().is_some_and(|n| n.is_empty()) {
            return Err(Error::Config("concept_names is empty".into()));
        }
        Ok(Self {
            model,
            train,
            images: path("images", mcm_core::data::folder::IMAGES_DIR),
            attributes: path("attributes", mcm_core::data::folder::ATTRIBUTES_FILE),
            concept_names,
            bank: map.get("bank").map(PathBuf::from),
            bank_seed,
        })
    }

    /// The effective configuration as `key=value` lines.
    pub fn echo(&self) -> String {
        let mut pairs: Vec<(&str, String)> = self.model.to_pairs();
        pairs.extend(self.train.to_pairs());
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let run = [
            ("images", show(&self.images)),
            ("attributes", show(&self.attributes)),
            ("concept_names", self.concept_names.as_ref().map(|n| n.join(","))),
            ("bank", show(&self.bank)),
            ("bank_seed", Some(self.bank_seed.to_string())),
        ];
        pairs.extend(run.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        pairs_text(&pairs)
    }
}

pub fn split_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}
