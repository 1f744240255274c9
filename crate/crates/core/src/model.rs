//! Model kinds behind one interface, and the on-disk model artifact.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::domain::{AqiClass, Dataset, N_CLASSES};
use crate::error::{Error, Result};
use crate::eval::metrics::majority_class;
use crate::features::{
    build_windows, encode_device, fit_scaler, rf_dim, select_rf_features, FeatureConfig, FeatureManifest,
    WindowInstance, DEFAULT_WINDOW,
};
use crate::lstm::{self, HyperParams, SequenceModel, TrainingLog};
use crate::rf::{self, ForestConfig, ForestModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "rf")]
    Rf,
    #[serde(rename = "rf-t")]
    RfT,
    #[serde(rename = "lstm")]
    Lstm,
    #[serde(rename = "majority")]
    Majority,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Rf, ModelKind::RfT, ModelKind::Lstm, ModelKind::Majority];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rf => "rf",
            ModelKind::RfT => "rf-t",
            ModelKind::Lstm => "lstm",
            ModelKind::Majority => "majority",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}` (expected rf, rf-t, lstm or majority)")))
    }
}

/// Everything needed to fit one model kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub window: usize,
    pub forest: ForestConfig,
    pub lstm: HyperParams,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            window: DEFAULT_WINDOW,
            forest: ForestConfig::default(),
            lstm: HyperParams::default(),
        }
    }

    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self.lstm.window = window;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainedModel {
    Forest { temporal: bool, forest: ForestModel },
    Sequence { model: SequenceModel, log: TrainingLog },
    Majority { class: AqiClass },
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Forest { temporal: false, .. } => ModelKind::Rf,
            TrainedModel::Forest { temporal: true, .. } => ModelKind::RfT,
            TrainedModel::Sequence { .. } => ModelKind::Lstm,
            TrainedModel::Majority { .. } => ModelKind::Majority,
        }
    }

    /// Class probabilities for a window of encoded rows (oldest first).
    pub fn predict_steps(&self, steps: &[&[f64]]) -> Result<[f64; N_CLASSES]> {
        let last = steps.last().ok_or(Error::Empty("window"))?;
        match self {
            TrainedModel::Forest { temporal, forest } => forest.predict_proba(&select_rf_features(last, *temporal)),
            TrainedModel::Sequence { model, .. } => model.predict_proba(steps),
            TrainedModel::Majority { class } => {
                let mut p = [0.0; N_CLASSES];
                p[class.index()] = 1.0;
                Ok(p)
            }
        }
    }

    /// Attention weights, for sequence models only.
    pub fn attention(&self, steps: &[&[f64]]) -> Result<Option<Vec<f64>>> {
        match self {
            TrainedModel::Sequence { model, .. } => Ok(Some(model.forward(steps, None)?.attention)),
            _ => Ok(None),
        }
    }

    pub fn predict_proba(&self, inst: &WindowInstance) -> Result<[f64; N_CLASSES]> {
        self.predict_steps(&inst.steps())
    }

    pub fn predict(&self, inst: &WindowInstance) -> Result<AqiClass> {
        AqiClass::from_index(rf::argmax(&self.predict_proba(inst)?))
    }

    pub fn training_log(&self) -> Option<&TrainingLog> {
        match self {
            TrainedModel::Sequence { log, .. } => Some(log),
            _ => None,
        }
    }
}

/// Fits `spec.kind` on windows with the given labels.
pub fn fit(spec: &ModelSpec, instances: &[WindowInstance], labels: &[AqiClass], seed: u64) -> Result<TrainedModel> {
    if instances.is_empty() {
        return Err(Error::Empty("training instances"));
    }
    if instances.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", instances.len()),
            got: labels.len().to_string(),
        });
    }
    match spec.kind {
        ModelKind::Rf | ModelKind::RfT => {
            let temporal = spec.kind == ModelKind::RfT;
            let x: Vec<Vec<f64>> = instances
                .iter()
                .map(|w| select_rf_features(w.last().features.as_slice(), temporal))
                .collect();
            debug_assert!(x.iter().all(|r| r.len() == rf_dim(temporal)));
            let cfg = ForestConfig { seed, ..spec.forest };
            Ok(TrainedModel::Forest {
                temporal,
                forest: rf::train_forest(&x, labels, &cfg)?,
            })
        }
        ModelKind::Lstm => {
            let hp = HyperParams {
                window: spec.window,
                ..spec.lstm
            };
            let (model, log) = lstm::train(instances, labels, &hp, seed)?;
            Ok(TrainedModel::Sequence { model, log })
        }
        ModelKind::Majority => Ok(TrainedModel::Majority {
            class: majority_class(labels)?,
        }),
    }
}

/// A trained model together with the encoding it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub kind: ModelKind,
    pub seed: u64,
    pub spec: ModelSpec,
    pub manifest: FeatureManifest,
    pub manifest_hash: String,
    pub train_devices: Vec<String>,
    pub n_train_instances: usize,
    pub run_config: serde_json::Value,
    pub model: TrainedModel,
}

impl ModelArtifact {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let a: ModelArtifact = serde_json::from_slice(bytes)?;
        if a.format_version != Self::FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "model format version {} is not supported",
                a.format_version
            )));
        }
        if a.manifest.hash() != a.manifest_hash {
            return Err(Error::Validation("manifest hash does not match manifest".into()));
        }
        if a.kind != a.model.kind() {
            return Err(Error::Validation("model kind does not match parameters".into()));
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    /// Short content hash identifying this artifact.
    pub fn version(&self) -> Result<String> {
        Ok(crate::io::sha256_hex(&self.to_json()?)[..16].to_string())
    }
}

/// Fits a scaler and a model on every labeled row of the given devices.
pub fn train_artifact(
    dataset: &Dataset,
    train_ids: &[String],
    spec: &ModelSpec,
    features: FeatureConfig,
    seed: u64,
    run_config: serde_json::Value,
) -> Result<ModelArtifact> {
    if train_ids.is_empty() {
        return Err(Error::Empty("training devices"));
    }
    let mut metas = Vec::with_capacity(train_ids.len());
    for id in train_ids {
        metas.push(
            dataset
                .device(id)
                .ok_or_else(|| Error::invalid(format!("unknown device {id}")))?,
        );
    }
    let scaler = fit_scaler(
        train_ids
            .iter()
            .flat_map(|id| dataset.samples(id))
            .filter(|s| s.label().is_some()),
    )?;
    let mut instances = Vec::new();
    for meta in &metas {
        let rows = encode_device(dataset.samples(&meta.device_id), meta, &scaler, &features)?;
        instances.extend(build_windows(&Arc::new(rows), spec.window)?);
    }
    let labels: Vec<AqiClass> = instances.iter().map(|w| w.label()).collect();
    let model = fit(spec, &instances, &labels, seed)?;
    let manifest = FeatureManifest::new(scaler, spec.window, metas[0].city_tag.clone(), features);
    Ok(ModelArtifact {
        format_version: ModelArtifact::FORMAT_VERSION,
        kind: spec.kind,
        seed,
        spec: *spec,
        manifest_hash: manifest.hash(),
        manifest,
        train_devices: train_ids.to_vec(),
        n_train_instances: instances.len(),
        run_config,
        model,
    })
}
