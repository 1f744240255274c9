use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    confusion, per_class_from_confusion, roc_auc_ovr, severity_from_confusion, weighted_f1_from_confusion,
    ClassMetrics, Confusion, SeverityRow,
};
use crate::domain::{AqiClass, Dataset, N_CLASSES};
use crate::error::{Error, Result};
use crate::features::{
    build_windows, encode_device, fit_scaler, FeatureConfig, ScalerState, WindowInstance,
};
use crate::lstm::TrainingLog;
use crate::model::{fit, ModelKind, ModelSpec, TrainedModel};
use crate::spatial::{nearest_device, SelectionMode};

/// Inputs shared by every protocol run.
#[derive(Debug, Clone, Copy)]
pub struct EvalSetup<'a> {
    pub dataset: &'a Dataset,
    pub spec: ModelSpec,
    pub features: FeatureConfig,
    pub seed: u64,
}

impl<'a> EvalSetup<'a> {
    pub fn new(dataset: &'a Dataset, spec: ModelSpec, seed: u64) -> Self {
        EvalSetup {
            dataset,
            spec,
            features: FeatureConfig::default(),
            seed,
        }
    }

    fn with_spec(&self, spec: ModelSpec) -> Self {
        EvalSetup { spec, ..*self }
    }
}

/// Encoded training and test windows for one split.
pub struct PreparedFold {
    pub scaler: ScalerState,
    pub train_devices: Vec<String>,
    pub test_device: String,
    pub train: Vec<WindowInstance>,
    pub test: Vec<WindowInstance>,
    /// Labeled rows available on the training devices.
    pub n_train_rows: usize,
}

fn device_windows(setup: &EvalSetup, id: &str, scaler: &ScalerState) -> Result<Vec<WindowInstance>> {
    let meta = setup
        .dataset
        .device(id)
        .ok_or_else(|| Error::invalid(format!("unknown device {id}")))?;
    let rows = encode_device(setup.dataset.samples(id), meta, scaler, &setup.features)?;
    build_windows(&Arc::new(rows), setup.spec.window)
}

/// Fits the scaler on the training devices only and windows both sides.
pub fn prepare_fold(setup: &EvalSetup, train_ids: &[String], test_id: &str) -> Result<PreparedFold> {
    if train_ids.iter().any(|t| t == test_id) {
        return Err(Error::invalid(format!("test device {test_id} is also a training device")));
    }
    let train_rows: Vec<_> = train_ids
        .iter()
        .flat_map(|id| setup.dataset.samples(id))
        .filter(|s| s.label().is_some())
        .collect();
    let scaler = fit_scaler(train_rows.iter().copied())?;
    let mut train = Vec::new();
    for id in train_ids {
        train.extend(device_windows(setup, id, &scaler)?);
    }
    let test = device_windows(setup, test_id, &scaler)?;
    Ok(PreparedFold {
        scaler,
        train_devices: train_ids.to_vec(),
        test_device: test_id.to_string(),
        train,
        test,
        n_train_rows: train_rows.len(),
    })
}

/// Outcome of training on some devices and testing on one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub device_id: String,
    pub train_devices: Vec<String>,
    pub n_train_rows: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Confusion,
    pub auc: [Option<f64>; N_CLASSES],
    pub severity: Vec<SeverityRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub training: Option<TrainingLog>,
    #[serde(skip)]
    pub y_true: Vec<AqiClass>,
    #[serde(skip)]
    pub y_pred: Vec<AqiClass>,
}

fn predict_all(model: &TrainedModel, instances: &[WindowInstance]) -> Result<Vec<[f64; N_CLASSES]>> {
    instances.par_iter().map(|w| model.predict_proba(w)).collect()
}

fn score(fold: &PreparedFold, model: &TrainedModel, n_train: usize) -> Result<FoldReport> {
    if fold.test.is_empty() {
        return Err(Error::Validation(format!(
            "device {} has no complete windows to test on",
            fold.test_device
        )));
    }
    let probs = predict_all(model, &fold.test)?;
    let y_true: Vec<AqiClass> = fold.test.iter().map(|w| w.label()).collect();
    let y_pred: Vec<AqiClass> = probs
        .iter()
        .map(|p| AqiClass::from_index(crate::rf::argmax(p)))
        .collect::<Result<_>>()?;
    let m = confusion(&y_true, &y_pred)?;
    Ok(FoldReport {
        device_id: fold.test_device.clone(),
        train_devices: fold.train_devices.clone(),
        n_train_rows: fold.n_train_rows,
        n_train,
        n_test: y_true.len(),
        weighted_f1: weighted_f1_from_confusion(&m),
        per_class: per_class_from_confusion(&m),
        confusion: m,
        auc: roc_auc_ovr(&y_true, &probs)?,
        severity: severity_from_confusion(&m),
        training: model.training_log().cloned(),
        y_true,
        y_pred,
    })
}

/// Trains on `train_ids` and evaluates on `test_id`.
pub fn run_fold(setup: &EvalSetup, train_ids: &[String], test_id: &str) -> Result<FoldReport> {
    let fold = prepare_fold(setup, train_ids, test_id)?;
    if fold.train.is_empty() {
        return Err(Error::Validation("training devices yield no complete windows".into()));
    }
    let labels: Vec<AqiClass> = fold.train.iter().map(|w| w.label()).collect();
    let model = fit(&setup.spec, &fold.train, &labels, setup.seed)?;
    score(&fold, &model, labels.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledMetrics {
    pub n: u64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Confusion,
    pub severity: Vec<SeverityRow>,
}

impl PooledMetrics {
    pub fn from_folds(folds: &[FoldReport]) -> Self {
        let mut m = [[0u64; N_CLASSES]; N_CLASSES];
        for f in folds {
            for (r, row) in f.confusion.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    m[r][c] += v;
                }
            }
        }
        PooledMetrics {
            n: m.iter().flatten().sum(),
            weighted_f1: weighted_f1_from_confusion(&m),
            per_class: per_class_from_confusion(&m),
            confusion: m,
            severity: severity_from_confusion(&m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub model_kind: ModelKind,
    pub seed: u64,
    pub window: usize,
    pub folds: Vec<FoldReport>,
    pub mean_weighted_f1: f64,
    pub pooled: PooledMetrics,
}

impl EvalReport {
    fn new(protocol: &str, setup: &EvalSetup, folds: Vec<FoldReport>) -> Self {
        let mean = folds.iter().map(|f| f.weighted_f1).sum::<f64>() / folds.len().max(1) as f64;
        EvalReport {
            protocol: protocol.to_string(),
            model_kind: setup.spec.kind,
            seed: setup.seed,
            window: setup.spec.window,
            pooled: PooledMetrics::from_folds(&folds),
            folds,
            mean_weighted_f1: mean,
        }
    }

    pub fn fold(&self, device_id: &str) -> Option<&FoldReport> {
        self.folds.iter().find(|f| f.device_id == device_id)
    }

    /// `device_id,train_devices,weighted_f1,n_train,n_test`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("device_id,train_devices,weighted_f1,n_train,n_test\n");
        for f in &self.folds {
            s += &format!(
                "{},{},{},{},{}\n",
                f.device_id,
                f.train_devices.join(";"),
                f.weighted_f1,
                f.n_train,
                f.n_test
            );
        }
        s
    }
}

fn need_devices(ds: &Dataset, n: usize) -> Result<()> {
    if ds.devices().len() < n {
        return Err(Error::Validation(format!(
            "protocol needs at least {n} devices, dataset has {}",
            ds.devices().len()
        )));
    }
    Ok(())
}

fn loo_over(setup: &EvalSetup, ids: &[String]) -> Result<Vec<FoldReport>> {
    ids.par_iter()
        .map(|test| {
            let train: Vec<String> = ids.iter().filter(|d| *d != test).cloned().collect();
            run_fold(setup, &train, test)
        })
        .collect()
}

/// Holds out each device in turn and trains on all the others.
pub fn leave_one_out(setup: &EvalSetup) -> Result<EvalReport> {
    need_devices(setup.dataset, 2)?;
    let folds = loo_over(setup, &setup.dataset.device_ids())?;
    Ok(EvalReport::new("loo", setup, folds))
}

/// Trains on the single device nearest to `target` under `mode`.
pub fn single_source(setup: &EvalSetup, target: &str, mode: SelectionMode) -> Result<FoldReport> {
    need_devices(setup.dataset, 2)?;
    let meta = setup
        .dataset
        .device(target)
        .ok_or_else(|| Error::invalid(format!("unknown device {target}")))?;
    let pool: Vec<_> = setup
        .dataset
        .devices()
        .iter()
        .filter(|d| d.device_id != target)
        .cloned()
        .collect();
    let trainer = nearest_device(meta, &pool, mode)?;
    run_fold(setup, &[trainer.device_id.clone()], target)
}

/// Single-source evaluation with every device as the target.
pub fn single_source_all(setup: &EvalSetup, mode: SelectionMode) -> Result<EvalReport> {
    let ids = setup.dataset.device_ids();
    let folds = ids
        .par_iter()
        .map(|t| single_source(setup, t, mode))
        .collect::<Result<Vec<_>>>()?;
    let tag = match mode {
        SelectionMode::Distance => "distance",
        SelectionMode::Similarity => "similarity",
    };
    Ok(EvalReport::new(tag, setup, folds))
}

fn seeded_order(ids: &[String], seed: u64) -> Vec<String> {
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationLevel {
    pub k: usize,
    pub removed: Vec<String>,
    pub remaining: Vec<String>,
    /// Labeled rows across the remaining devices.
    pub pool_rows: usize,
    pub mean_weighted_f1: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub model_kind: ModelKind,
    pub removal_order_seed: u64,
    pub removal_order: Vec<String>,
    pub levels: Vec<AblationLevel>,
}

impl AblationReport {
    pub fn level(&self, k: usize) -> Option<&AblationLevel> {
        self.levels.iter().find(|l| l.k == k)
    }

    /// `k,device_id,weighted_f1`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,device_id,weighted_f1\n");
        for l in &self.levels {
            for f in &l.report.folds {
                s += &format!("{},{},{}\n", l.k, f.device_id, f.weighted_f1);
            }
        }
        s
    }
}

/// Removes the first `k` devices of a seeded permutation, then runs
/// leave-one-out over what remains.
pub fn device_ablation(setup: &EvalSetup, removal_order_seed: u64, ks: &[usize]) -> Result<AblationReport> {
    let ids = setup.dataset.device_ids();
    need_devices(setup.dataset, 2)?;
    let order = seeded_order(&ids, removal_order_seed);
    let mut levels = Vec::new();
    for &k in ks {
        if k + 2 > ids.len() {
            return Err(Error::Validation(format!(
                "removing {k} of {} devices leaves fewer than 2",
                ids.len()
            )));
        }
        let removed: Vec<String> = order[..k].to_vec();
        let remaining: Vec<String> = ids.iter().filter(|d| !removed.contains(d)).cloned().collect();
        let pool_rows = remaining
            .iter()
            .map(|id| setup.dataset.samples(id).iter().filter(|s| s.label().is_some()).count())
            .sum();
        let folds = loo_over(setup, &remaining)?;
        let report = EvalReport::new("ablation", setup, folds);
        levels.push(AblationLevel {
            k,
            removed,
            remaining,
            pool_rows,
            mean_weighted_f1: report.mean_weighted_f1,
            report,
        });
    }
    Ok(AblationReport {
        model_kind: setup.spec.kind,
        removal_order_seed,
        removal_order: order,
        levels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    GroundTruth,
    SelfTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressStep {
    pub added: String,
    pub train_devices: Vec<String>,
    pub n_train: usize,
    pub weighted_f1: f64,
    /// Self-train mode: fraction of pseudo-labels on the added device that
    /// agree with its true labels.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pseudo_label_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveReport {
    pub model_kind: ModelKind,
    pub labeling: Labeling,
    pub order_seed: u64,
    pub held_out: String,
    pub base: Vec<String>,
    pub order: Vec<String>,
    pub base_f1: f64,
    pub steps: Vec<ProgressStep>,
}

impl ProgressiveReport {
    /// `step,added_device,weighted_f1`; step 0 is the base set.
    pub fn to_csv(&self) -> String {
        let mut s = format!("step,added_device,weighted_f1\n0,,{}\n", self.base_f1);
        for (i, st) in self.steps.iter().enumerate() {
            s += &format!("{},{},{}\n", i + 1, st.added, st.weighted_f1);
        }
        s
    }
}

type PseudoLabels = BTreeMap<(String, DateTime<Utc>), AqiClass>;

/// Starts from a one-device base set and adds devices one at a time,
/// evaluating on a fixed held-out device after each addition. The seeded
/// permutation puts the held-out device first, the base device second.
pub fn progressive_deployment(setup: &EvalSetup, order_seed: u64, labeling: Labeling) -> Result<ProgressiveReport> {
    need_devices(setup.dataset, 3)?;
    let order = seeded_order(&setup.dataset.device_ids(), order_seed);
    let held_out = order[0].clone();
    let base = vec![order[1].clone()];
    let mut pseudo: PseudoLabels = BTreeMap::new();

    let train_and_score = |train_ids: &[String], pseudo: &PseudoLabels| -> Result<(TrainedModel, FoldReport)> {
        let fold = prepare_fold(setup, train_ids, &held_out)?;
        let labels: Vec<AqiClass> = fold
            .train
            .iter()
            .map(|w| {
                *pseudo
                    .get(&(w.device_id().to_string(), w.end_timestamp()))
                    .unwrap_or(&w.label())
            })
            .collect();
        let model = fit(&setup.spec, &fold.train, &labels, setup.seed)?;
        let report = score(&fold, &model, labels.len())?;
        Ok((model, report))
    };

    let (mut model, base_report) = train_and_score(&base, &pseudo)?;
    let mut train_ids = base.clone();
    let mut steps = Vec::new();
    for added in &order[2..] {
        let mut agreement = None;
        if labeling == Labeling::SelfTrain {
            // label the new device with the current model, under the scaler
            // the current model was trained with
            let prev = prepare_fold(setup, &train_ids, added)?;
            let probs = predict_all(&model, &prev.test)?;
            let mut agree = 0usize;
            for (w, p) in prev.test.iter().zip(&probs) {
                let c = AqiClass::from_index(crate::rf::argmax(p))?;
                agree += (c == w.label()) as usize;
                pseudo.insert((added.clone(), w.end_timestamp()), c);
            }
            agreement = Some(agree as f64 / prev.test.len().max(1) as f64);
        }
        train_ids.push(added.clone());
        let (m, report) = train_and_score(&train_ids, &pseudo)?;
        model = m;
        steps.push(ProgressStep {
            added: added.clone(),
            train_devices: train_ids.clone(),
            n_train: report.n_train,
            weighted_f1: report.weighted_f1,
            pseudo_label_agreement: agreement,
        });
    }
    Ok(ProgressiveReport {
        model_kind: setup.spec.kind,
        labeling,
        order_seed,
        held_out,
        base,
        order,
        base_f1: base_report.weighted_f1,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: usize,
    pub mean_weighted_f1: f64,
    pub n_test_instances: usize,
    pub n_train_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSweepReport {
    pub model_kind: ModelKind,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl WindowSweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("window,mean_weighted_f1,n_test_instances,n_train_instances\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{}\n",
                r.window, r.mean_weighted_f1, r.n_test_instances, r.n_train_instances
            );
        }
        s
    }
}

/// Leave-one-out mean weighted F1 for each window length.
pub fn window_sweep(setup: &EvalSetup, windows: &[usize]) -> Result<WindowSweepReport> {
    if windows.is_empty() {
        return Err(Error::invalid("no window lengths requested"));
    }
    let mut rows = Vec::new();
    for &t in windows {
        let s = setup.with_spec(setup.spec.with_window(t));
        let r = leave_one_out(&s)?;
        rows.push(SweepRow {
            window: t,
            mean_weighted_f1: r.mean_weighted_f1,
            n_test_instances: r.folds.iter().map(|f| f.n_test).sum(),
            n_train_instances: r.folds.iter().map(|f| f.n_train).sum(),
        });
    }
    Ok(WindowSweepReport {
        model_kind: setup.spec.kind,
        seed: setup.seed,
        rows,
    })
}
