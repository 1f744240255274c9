//! Sensor calibration statistics: zero-air baseline offsets, two-sample
//! similarity tests against a reference device, and event correlation.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::domain::Sample;
use crate::error::{Error, Result};
use crate::ingest::Field;

pub const MIN_RUN: usize = 10;
pub const MIN_EVENT: usize = 5;
pub const P_THRESHOLD: f64 = 0.05;
pub const R_THRESHOLD: f64 = 0.9;

fn field_values(samples: &[Sample], field: Field) -> Vec<f64> {
    samples.iter().filter_map(|s| field.of(s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub field: String,
    pub offset: f64,
    pub n: usize,
    pub window_start: Option<DateTime<Utc>>,
    pub window_end: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corrected {
    pub values: Vec<f64>,
    /// Readings that would have gone negative and were clamped to zero.
    pub clamped: usize,
}

impl BaselineState {
    pub fn correct(&self, raw: f64) -> (f64, bool) {
        let v = raw - self.offset;
        if v < 0.0 {
            (0.0, true)
        } else {
            (v, false)
        }
    }

    pub fn correct_all(&self, raw: &[f64]) -> Corrected {
        let mut clamped = 0;
        let values = raw
            .iter()
            .map(|&r| {
                let (v, c) = self.correct(r);
                clamped += c as usize;
                v
            })
            .collect();
        Corrected { values, clamped }
    }
}

/// Offset = mean of the field over a zero-condition run.
pub fn estimate_baseline(zero_run: &[Sample], field: Field) -> Result<BaselineState> {
    let vals = field_values(zero_run, field);
    estimate_baseline_values(&vals, field.name()).map(|mut b| {
        b.window_start = zero_run.first().map(|s| s.timestamp);
        b.window_end = zero_run.last().map(|s| s.timestamp);
        b
    })
}

pub fn estimate_baseline_values(values: &[f64], field: &str) -> Result<BaselineState> {
    if values.len() < MIN_RUN {
        return Err(Error::Validation(format!(
            "zero run has {} readings, need at least {MIN_RUN}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("zero run contains non-finite readings"));
    }
    Ok(BaselineState {
        field: field.to_string(),
        offset: values.iter().sum::<f64>() / values.len() as f64,
        n: values.len(),
        window_start: None,
        window_end: None,
    })
}

/// Reference and candidate series on shared timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub field: String,
    pub timestamps: Vec<DateTime<Utc>>,
    pub reference: Vec<f64>,
    pub candidate: Vec<f64>,
}

impl PairedRun {
    pub fn new(field: &str, reference: Vec<f64>, candidate: Vec<f64>) -> Result<Self> {
        if reference.len() != candidate.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} candidate readings", reference.len()),
                got: candidate.len().to_string(),
            });
        }
        if reference.len() < MIN_RUN {
            return Err(Error::Validation(format!(
                "paired run has {} points, need at least {MIN_RUN}",
                reference.len()
            )));
        }
        if reference.iter().chain(&candidate).any(|v| !v.is_finite()) {
            return Err(Error::invalid("paired run contains non-finite readings"));
        }
        Ok(PairedRun {
            field: field.to_string(),
            timestamps: Vec::new(),
            reference,
            candidate,
        })
    }

    /// Inner join of two devices' readings on timestamp.
    pub fn align(reference: &[Sample], candidate: &[Sample], field: Field) -> Result<Self> {
        let cand: BTreeMap<DateTime<Utc>, f64> = candidate
            .iter()
            .filter_map(|s| field.of(s).map(|v| (s.timestamp, v)))
            .collect();
        let mut ts = Vec::new();
        let mut r = Vec::new();
        let mut c = Vec::new();
        let refs: BTreeMap<DateTime<Utc>, f64> = reference
            .iter()
            .filter_map(|s| field.of(s).map(|v| (s.timestamp, v)))
            .collect();
        for (t, v) in refs {
            if let Some(&w) = cand.get(&t) {
                ts.push(t);
                r.push(v);
                c.push(w);
            }
        }
        let mut run = PairedRun::new(field.name(), r, c)?;
        run.timestamps = ts;
        Ok(run)
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub pass: bool,
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation("each series needs at least 2 points".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        let (t, p) = if ma == mb { (0.0, 1.0) } else { (f64::INFINITY.copysign(ma - mb), 0.0) };
        return Ok(WelchResult {
            t,
            df: na + nb - 2.0,
            p_value: p,
            pass: p > P_THRESHOLD,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Validation(format!("t distribution: {e}")))?;
    let p_value = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(WelchResult {
        t,
        df,
        p_value,
        pass: p_value > P_THRESHOLD,
    })
}

/// Welch test between reference and candidate; passes when no significant
/// difference is found at 5%.
pub fn similarity_test(run: &PairedRun) -> Result<WelchResult> {
    welch_t_test(&run.reference, &run.candidate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub pearson_r: Option<f64>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation inside `event` (index range into the run).
pub fn sensitivity_agreement(run: &PairedRun, event: std::ops::Range<usize>) -> Result<Agreement> {
    if event.end > run.len() || event.start >= event.end {
        return Err(Error::invalid(format!(
            "event window {event:?} outside run of {} points",
            run.len()
        )));
    }
    if event.len() < MIN_EVENT {
        return Err(Error::Validation(format!(
            "event window has {} points, need at least {MIN_EVENT}",
            event.len()
        )));
    }
    let a = &run.reference[event.clone()];
    let b = &run.candidate[event];
    Ok(match pearson(a, b) {
        Some(r) => Agreement {
            pearson_r: Some(r),
            pass: r >= R_THRESHOLD,
            reason: None,
        },
        None => Agreement {
            pearson_r: None,
            pass: false,
            reason: Some("zero variance".into()),
        },
    })
}
