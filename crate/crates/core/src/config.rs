//! Run configuration shared by the CLI and the pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, DEFAULT_WINDOW};
use crate::ingest::GridConfig;
use crate::lstm::HyperParams;
use crate::model::{ModelKind, ModelSpec};
use crate::rf::ForestConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_devices: usize,
    pub months: u32,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { n_devices: 4, months: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub city_tag: String,
    pub utc_offset_minutes: i32,
    pub grid: GridConfig,
    /// Ingest fails when a larger share of mandatory values was forward-filled.
    pub max_filled_fraction: f64,
    pub window: usize,
    /// Model trained by `train` and the pipeline.
    pub model: ModelKind,
    /// Models compared by the pipeline's evaluation stage.
    pub eval_models: Vec<ModelKind>,
    pub forest: ForestConfig,
    pub lstm: HyperParams,
    pub seed: u64,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            city_tag: "durgapur".into(),
            utc_offset_minutes: 330,
            grid: GridConfig::default(),
            max_filled_fraction: 0.10,
            window: DEFAULT_WINDOW,
            model: ModelKind::Lstm,
            eval_models: vec![ModelKind::Majority, ModelKind::Rf, ModelKind::RfT, ModelKind::Lstm],
            forest: ForestConfig::default(),
            lstm: HyperParams::default(),
            seed: 1,
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    /// Full hyperparameters except for a smaller LSTM, a short patience
    /// and strided training windows, so a run fits on one desktop core.
    pub fn desk() -> Self {
        RunConfig {
            lstm: desk_lstm(),
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.grid.step_hours != 1 {
            return Err(Error::Config("only a 1-hour grid step is supported".into()));
        }
        if !(0.0..=1.0).contains(&self.max_filled_fraction) {
            return Err(Error::Config("max_filled_fraction must lie in [0, 1]".into()));
        }
        if self.utc_offset_minutes.abs() >= 24 * 60 {
            return Err(Error::Config("utc_offset_minutes must be within one day".into()));
        }
        if self.forest.n_estimators == 0 || self.forest.max_depth == 0 {
            return Err(Error::Config("forest needs n_estimators >= 1 and max_depth >= 1".into()));
        }
        self.lstm.validate()
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            utc_offset_minutes: self.utc_offset_minutes,
        }
    }

    pub fn spec(&self, kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            window: self.window,
            forest: self.forest,
            lstm: HyperParams {
                window: self.window,
                ..self.lstm
            },
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

pub fn desk_lstm() -> HyperParams {
    HyperParams {
        hidden: 16,
        learning_rate: 0.005,
        epochs: 30,
        batch_size: 64,
        patience: Some(5),
        instance_stride: 3,
        ..HyperParams::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"window": 6, "model": "rf-t"}"#).unwrap();
        assert_eq!(cfg.window, 6);
        assert_eq!(cfg.model, ModelKind::RfT);
        assert_eq!(cfg.lstm.hidden, 128);
        assert_eq!(cfg.spec(ModelKind::Lstm).lstm.window, 6);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"windw": 6}"#).is_err());
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.window, 18);
        assert_eq!((cfg.forest.n_estimators, cfg.forest.max_depth), (100, 20));
        let h = cfg.lstm;
        assert_eq!((h.hidden, h.batch_size, h.epochs), (128, 256, 1000));
        assert_eq!((h.dropout, h.l2, h.learning_rate), (0.2, 0.001, 0.001));
        assert!(RunConfig::preset("desk").unwrap().validate().is_ok());
        assert!(RunConfig::preset("huge").is_err());
    }
}
