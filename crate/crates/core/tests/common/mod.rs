#![allow(dead_code)]

use std::sync::Arc;

use aqi_core::features::{build_windows, DeviceRows, EncodedRow, FeatureRow, WindowInstance, FEATURE_DIM};
use aqi_core::lstm::SequenceModel;
use aqi_core::AqiClass;
use chrono::{Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Learnable windows: the label follows the mean of feature 0 over the window.
pub fn toy_instances(n: usize, t: usize) -> (Vec<WindowInstance>, Vec<AqiClass>) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
    let mut level: f64 = 0.5;
    let rows: Vec<EncodedRow> = (0..n + t - 1)
        .map(|k| {
            level = (level + rng.random_range(-0.25..0.25)).clamp(0.0, 0.999);
            let mut v = vec![0.0; FEATURE_DIM];
            v[0] = level;
            v[1] = rng.random_range(0.0..1.0);
            EncodedRow {
                timestamp: t0 + Duration::hours(k as i64),
                features: FeatureRow::from_values(v).unwrap(),
                label: AqiClass::new(1 + (level * 5.0) as u8).unwrap(),
            }
        })
        .collect();
    let series = Arc::new(DeviceRows {
        device_id: "toy".into(),
        rows,
        unknown_weather: 0,
    });
    let inst = build_windows(&series, t).unwrap();
    let labels = inst.iter().map(|w| w.label()).collect();
    (inst, labels)
}

pub fn batch_data(rng: &mut ChaCha8Rng, b: usize, t: usize, d: usize) -> Vec<(Vec<Vec<f64>>, AqiClass)> {
    (0..b)
        .map(|_| {
            let w = (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            (w, AqiClass::new(rng.random_range(1..=5)).unwrap())
        })
        .collect()
}

pub fn as_refs(data: &[(Vec<Vec<f64>>, AqiClass)]) -> Vec<(Vec<&[f64]>, AqiClass)> {
    data.iter()
        .map(|(w, y)| (w.iter().map(|r| r.as_slice()).collect(), *y))
        .collect()
}

/// Worst relative error between analytic and central-difference gradients,
/// per parameter group.
pub fn gradient_check(seed: u64, l2: f64) -> Vec<(&'static str, f64)> {
    let (h, t, d, b) = (4, 3, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SequenceModel::init(d, h, seed);
    // move biases off zero so every block carries signal
    for p in model.params.iter_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let data = batch_data(&mut rng, b, t, d);
    let batch = as_refs(&data);
    let (_, grad) = model.loss_and_grad(&batch, l2, None).unwrap();
    let eps = 1e-5;
    let layout = model.layout();
    let mut out = Vec::new();
    for (name, range) in layout.groups() {
        let mut worst: f64 = 0.0;
        for i in range {
            let orig = model.params[i];
            model.params[i] = orig + eps;
            let up = model.loss(&batch, l2).unwrap();
            model.params[i] = orig - eps;
            let down = model.loss(&batch, l2).unwrap();
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (grad[i] - numeric).abs() / (grad[i].abs().max(numeric.abs()).max(1e-6));
            worst = worst.max(rel);
        }
        out.push((name, worst));
    }
    out
}


/// Weighted F1 by direct per-class counting over the label vectors.
pub fn weighted_f1_oracle(y_true: &[u8], y_pred: &[u8]) -> f64 {
    let n = y_true.len() as f64;
    let mut total = 0.0;
    for c in 1..=5u8 {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&t, &p) in y_true.iter().zip(y_pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        let support = tp + fn_;
        if support == 0.0 {
            continue;
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = tp / support;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += support * f1;
    }
    total / n
}

/// One-vs-rest AUC by comparing every positive with every negative.
pub fn auc_oracle(y_true: &[u8], scores: &[[f64; 5]]) -> [Option<f64>; 5] {
    let mut out = [None; 5];
    for c in 0..5 {
        let pos: Vec<f64> = (0..y_true.len()).filter(|&i| y_true[i] as usize == c + 1).map(|i| scores[i][c]).collect();
        let neg: Vec<f64> = (0..y_true.len()).filter(|&i| y_true[i] as usize != c + 1).map(|i| scores[i][c]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for p in &pos {
            for q in &neg {
                if p > q {
                    wins += 1.0;
                } else if p == q {
                    wins += 0.5;
                }
            }
        }
        out[c] = Some(wins / (pos.len() * neg.len()) as f64);
    }
    out
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: u8) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(1..=k)).collect()
}

/// Weighted Gini impurity of splitting `rows` at `x[f] <= thr`.
pub fn split_impurity(x: &[Vec<f64>], y: &[u8], rows: &[usize], f: usize, thr: f64) -> f64 {
    let gini = |part: &[usize]| -> f64 {
        if part.is_empty() {
            return 0.0;
        }
        let n = part.len() as f64;
        1.0 - (1..=5u8)
            .map(|c| {
                let p = part.iter().filter(|&&i| y[i] == c).count() as f64 / n;
                p * p
            })
            .sum::<f64>()
    };
    let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][f] <= thr);
    (l.len() as f64 * gini(&l) + r.len() as f64 * gini(&r)) / rows.len() as f64
}

/// Minimum impurity over every midpoint threshold of every feature, or
/// `None` when all features are constant on `rows`.
pub fn split_oracle(x: &[Vec<f64>], y: &[u8], rows: &[usize], features: &[usize]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for &f in features {
        let mut vals: Vec<f64> = rows.iter().map(|&i| x[i][f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let imp = split_impurity(x, y, rows, f, w[0] + (w[1] - w[0]) / 2.0);
            best = Some(best.map_or(imp, |b: f64| b.min(imp)));
        }
    }
    best
}

/// Small random dataset with many ties: up to 20 rows, 1 to 3 features.
pub fn small_split_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<u8>, Vec<usize>, Vec<usize>) {
    let n = rng.random_range(2..=20);
    let d = rng.random_range(1..=3);
    let levels = rng.random_range(2..=6);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(0..levels) as f64 * 0.5 - 1.0).collect())
        .collect();
    let k = rng.random_range(1..=5);
    let y = random_labels(rng, n, k);
    // bootstrap-style row multiset
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mut features: Vec<usize> = (0..d).collect();
    if d > 1 && rng.random_bool(0.5) {
        features.reverse();
    }
    (x, y, rows, features)
}

pub fn corpus(n_devices: usize, months: u32, seed: u64) -> aqi_core::synth::SynthCorpus {
    aqi_core::synth::synth_corpus(&aqi_core::synth::SynthConfig {
        seed,
        n_devices,
        months,
        ..Default::default()
    })
    .unwrap()
}

/// A 10-tree forest spec for quick protocol runs.
pub fn quick_spec(kind: aqi_core::model::ModelKind) -> aqi_core::model::ModelSpec {
    let mut spec = aqi_core::model::ModelSpec::new(kind);
    spec.forest.n_estimators = 10;
    spec
}
