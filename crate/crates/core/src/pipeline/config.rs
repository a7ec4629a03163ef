//! Pipeline configuration. Each section is optional in the JSON document;
//! missing keys keep their defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baseline::ForestConfig;
use crate::dataset::{SplitSpec, PATCH_SIZE, PATCH_STRIDE};
use crate::despeckle::{LeeParams, NoiseCv};
use crate::error::{Error, Result};
use crate::evaluation::ModelSpec;
use crate::features::SeasonDefinition;
use crate::model::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {
    /// Parameters of the Lee feature band.
    pub lee: LeeParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Feature,
    Timeseries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub split: SplitSpec,
    pub mode: DatasetMode,
    /// Scenes per season in time-series mode.
    pub k: usize,
    /// Time-series mode without despeckling.
    pub raw: bool,
    pub allow_empty_classes: bool,
    /// Crop each tile to the square of this side with the most classes.
    pub select_window: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            patch_size: PATCH_SIZE,
            stride: PATCH_STRIDE,
            split: SplitSpec::default(),
            mode: DatasetMode::Feature,
            k: 5,
            raw: false,
            allow_empty_classes: false,
            select_window: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Models trained and scored by the pipeline, from "swin" and "rf".
    pub models: Vec<String>,
    /// Model used for the ecoregion matrix; `None` skips it.
    pub ecoregion_model: Option<String>,
    /// Random forests on each season's seven bands alone.
    pub season_ablation: bool,
    /// Also train the Swin-Unet on time-series-mode inputs.
    pub timeseries_comparison: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            models: vec!["swin".into(), "rf".into()],
            ecoregion_model: Some("rf".into()),
            season_ablation: false,
            timeseries_comparison: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub tiles: usize,
    pub width: usize,
    pub height: usize,
    /// Class codes 0..n; code 0 is the no-data region.
    pub n_classes: usize,
    pub enl: f64,
    pub texture: f64,
    pub scenes_per_season: [usize; 4],
    pub year: i32,
    /// Tiles are dealt round-robin to this many ecoregions.
    pub ecoregions: usize,
    /// Region r multiplies every class mean by `ecoregion_shift^r`.
    pub ecoregion_shift: f64,
    /// The last this-many tiles get only three spring scenes.
    pub short_season_tiles: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            tiles: 6,
            width: 128,
            height: 128,
            n_classes: 5,
            enl: 1.0,
            texture: 1.5,
            scenes_per_season: [5; 4],
            year: 2021,
            ecoregions: 2,
            ecoregion_shift: 1.0,
            short_season_tiles: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles == 0 || self.width == 0 || self.height == 0 || self.ecoregions == 0 {
            return Err(Error::invalid("synth: tiles, size and ecoregions must be positive"));
        }
        if !(2..=crate::synthetic::MAX_CLASSES).contains(&self.n_classes) {
            return Err(Error::invalid(format!("synth: n_classes must lie in 2..=9, got {}", self.n_classes)));
        }
        if !(self.ecoregion_shift > 0.0) {
            return Err(Error::invalid("synth: ecoregion_shift must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub io: IoConfig,
    pub seasons: SeasonDefinition,
    pub despeckle: LeeParams,
    pub features: FeaturesConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub forest: ForestConfig,
    pub evaluate: EvaluateConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut model = ModelConfig::full();
        // 256-pixel patches give 64x64 tokens, which a 7-wide window cannot tile
        model.window = 8;
        Self {
            io: IoConfig::default(),
            seasons: SeasonDefinition::default(),
            despeckle: LeeParams { window: 7, noise_cv: NoiseCv::Auto },
            features: FeaturesConfig::default(),
            dataset: DatasetConfig::default(),
            model,
            train: TrainConfig::default(),
            forest: ForestConfig::default(),
            evaluate: EvaluateConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Overlays `over` onto `base`, recursing into objects.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        if !over.is_object() {
            return Err(Error::invalid("config must be a JSON object"));
        }
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, over);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.seasons.validate()?;
        self.despeckle.validate()?;
        self.features.lee.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.forest.validate()?;
        self.synth.validate()?;
        let d = &self.dataset;
        if d.patch_size == 0 || d.stride == 0 || d.k == 0 {
            return Err(Error::invalid("dataset: patch_size, stride and k must be positive"));
        }
        if !(d.split.train_fraction > 0.0 && d.split.train_fraction < 1.0) {
            return Err(Error::invalid("dataset: train_fraction must lie in (0, 1)"));
        }
        for m in self.evaluate.models.iter().chain(&self.evaluate.ecoregion_model) {
            if m != "swin" && m != "rf" {
                return Err(Error::invalid(format!("evaluate: unknown model {m:?}")));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, name: &str, in_channels: usize) -> Result<ModelSpec> {
        match name {
            "swin" => Ok(ModelSpec::Swin {
                model: ModelConfig { in_channels, ..self.model.clone() },
                train: self.train.clone(),
            }),
            "rf" => Ok(ModelSpec::Forest { forest: self.forest.clone() }),
            other => Err(Error::invalid(format!("unknown model {other:?}; expected swin or rf"))),
        }
    }
}
