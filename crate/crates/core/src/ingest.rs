//! Regularization of asynchronous, change-triggered sensor streams onto a
//! fixed UTC grid.
//!
//! An event stamped `t` belongs to the window that closes at the first grid
//! instant at-or-after `t`; within a window the latest event wins. A grid row
//! takes, per field, the value of the latest window at-or-before it. Rows
//! between two observations of a field are forward-filled only when the whole
//! run of missing windows is at most `fill_cap` long; a longer run leaves the
//! field unavailable for the entire run, which for a mandatory field removes
//! those rows and splits the series into segments. Trailing runs (no later
//! observation inside the output extent) follow the same rule, measured to
//! the last grid row. Because runs are judged whole, feeding the output back
//! in reproduces it exactly.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Pm25,
    Temperature,
    Humidity,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::Pm25, Field::Temperature, Field::Humidity];

    pub fn name(self) -> &'static str {
        match self {
            Field::Pm25 => "pm25",
            Field::Temperature => "temperature",
            Field::Humidity => "humidity",
        }
    }

    pub fn parse(s: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn of(self, s: &Sample) -> Option<f64> {
        match self {
            Field::Pm25 => s.pm25,
            Field::Temperature => Some(s.temperature),
            Field::Humidity => Some(s.humidity),
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub timestamp: DateTime<Utc>,
    pub field: Field,
    pub value: f64,
}

/// Irregular events of one device, sorted by time, with duplicate
/// `(timestamp, field)` pairs resolved last-write-wins.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStream {
    device_id: String,
    events: Vec<RawEvent>,
}

impl RawStream {
    pub fn new(device_id: impl Into<String>, mut events: Vec<RawEvent>) -> Self {
        // stable sort keeps arrival order among equal keys
        events.sort_by(|a, b| (a.timestamp, a.field).cmp(&(b.timestamp, b.field)));
        let mut deduped: Vec<RawEvent> = Vec::with_capacity(events.len());
        for e in events {
            match deduped.last_mut() {
                Some(last) if last.timestamp == e.timestamp && last.field == e.field => *last = e,
                _ => deduped.push(e),
            }
        }
        RawStream {
            device_id: device_id.into(),
            events: deduped,
        }
    }

    /// Re-expresses regular samples as events stamped at their grid instants.
    pub fn from_samples(device_id: impl Into<String>, samples: &[Sample]) -> Self {
        let events = samples
            .iter()
            .flat_map(|s| {
                Field::ALL.into_iter().filter_map(move |f| {
                    f.of(s).map(|value| RawEvent {
                        timestamp: s.timestamp,
                        field: f,
                        value,
                    })
                })
            })
            .collect();
        RawStream::new(device_id, events)
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn events(&self) -> &[RawEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub step_hours: u32,
    /// Longest run of missing windows that may be forward-filled.
    pub fill_cap: u32,
    /// Training data needs PM2.5 on every row; THM-only data does not.
    pub require_pm25: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            step_hours: 1,
            fill_cap: 6,
            require_pm25: true,
        }
    }
}

impl GridConfig {
    fn mandatory(&self, f: Field) -> bool {
        f != Field::Pm25 || self.require_pm25
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldAudit {
    pub observed: usize,
    pub filled: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FillAudit {
    pub fields: BTreeMap<Field, FieldAudit>,
    pub grid_rows: usize,
    pub rows_dropped: usize,
}

impl FillAudit {
    pub fn merge(&mut self, other: &FillAudit) {
        for (f, a) in &other.fields {
            let e = self.fields.entry(*f).or_default();
            e.observed += a.observed;
            e.filled += a.filled;
        }
        self.grid_rows += other.grid_rows;
        self.rows_dropped += other.rows_dropped;
    }

    /// Share of mandatory-field values in the output that were forward-filled.
    pub fn filled_fraction(&self, cfg: &GridConfig) -> f64 {
        let (mut filled, mut total) = (0, 0);
        for (f, a) in &self.fields {
            if cfg.mandatory(*f) {
                filled += a.filled;
                total += a.filled + a.observed;
            }
        }
        if total == 0 {
            0.0
        } else {
            filled as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regularized {
    pub samples: Vec<Sample>,
    pub audit: FillAudit,
    pub warnings: Vec<String>,
}

struct Observations {
    by_window: BTreeMap<i64, f64>,
}

impl Observations {
    /// Value for `row` and whether it was observed in that window.
    fn at(&self, row: i64, bound: i64, cap: i64) -> Option<(f64, bool)> {
        let (&a, &v) = self.by_window.range(..=row).next_back()?;
        if a == row {
            return Some((v, true));
        }
        let run = match self.by_window.range(a + 1..).next() {
            Some((&b, _)) if b <= bound => b - a - 1,
            _ => bound - a,
        };
        (run <= cap).then_some((v, false))
    }
}

fn window_of(ts: DateTime<Utc>, step: i64) -> i64 {
    let secs = ts.timestamp();
    let sub = ts.timestamp_subsec_nanos() > 0;
    let q = secs.div_euclid(step);
    if secs.rem_euclid(step) == 0 && !sub {
        q
    } else {
        q + 1
    }
}

fn floor_window(ts: DateTime<Utc>, step: i64) -> i64 {
    ts.timestamp().div_euclid(step)
}

/// Maps an irregular stream onto the grid; see the module docs for the rule.
pub fn regularize(stream: &RawStream, cfg: &GridConfig) -> Regularized {
    let mut audit = FillAudit::default();
    let mut warnings = Vec::new();
    let (Some(first), Some(last)) = (stream.events.first(), stream.events.last()) else {
        warnings.push(format!("{}: empty stream", stream.device_id));
        return Regularized {
            samples: Vec::new(),
            audit,
            warnings,
        };
    };
    let step = i64::from(cfg.step_hours.max(1)) * 3600;
    let cap = i64::from(cfg.fill_cap);
    let start = window_of(first.timestamp, step);
    let end = floor_window(last.timestamp, step);

    let mut obs: BTreeMap<Field, Observations> = Field::ALL
        .into_iter()
        .map(|f| (f, Observations { by_window: BTreeMap::new() }))
        .collect();
    for e in &stream.events {
        let w = window_of(e.timestamp, step);
        obs.get_mut(&e.field).expect("all fields present").by_window.insert(w, e.value);
    }

    if start > end {
        warnings.push(format!("{}: no grid instant inside the stream span", stream.device_id));
        return Regularized {
            samples: Vec::new(),
            audit,
            warnings,
        };
    }
    audit.grid_rows = (end - start + 1) as usize;

    let mandatory: Vec<Field> = Field::ALL.into_iter().filter(|f| cfg.mandatory(*f)).collect();
    let mut rows: Vec<(i64, BTreeMap<Field, (f64, bool)>)> = Vec::new();
    for r in start..=end {
        let vals: Option<BTreeMap<Field, (f64, bool)>> = mandatory
            .iter()
            .map(|f| obs[f].at(r, end, cap).map(|v| (*f, v)))
            .collect();
        if let Some(v) = vals {
            rows.push((r, v));
        }
    }
    audit.rows_dropped = audit.grid_rows - rows.len();

    let last_row = rows.last().map(|(r, _)| *r).unwrap_or(end);
    let mut samples = Vec::with_capacity(rows.len());
    for (r, mut vals) in rows {
        for f in Field::ALL {
            if !cfg.mandatory(f) {
                if let Some(v) = obs[&f].at(r, last_row, cap) {
                    vals.insert(f, v);
                }
            }
        }
        for (f, (_, fresh)) in &vals {
            let a = audit.fields.entry(*f).or_default();
            if *fresh {
                a.observed += 1;
            } else {
                a.filled += 1;
            }
        }
        let get = |f: Field| vals.get(&f).map(|(v, _)| *v);
        samples.push(Sample {
            device_id: stream.device_id.clone(),
            timestamp: Utc.timestamp_opt(r * step, 0).single().expect("grid instant in range"),
            pm25: get(Field::Pm25),
            temperature: get(Field::Temperature).expect("mandatory"),
            humidity: get(Field::Humidity).expect("mandatory"),
            met: None,
        });
    }
    if audit.rows_dropped > 0 {
        warnings.push(format!(
            "{}: {} of {} grid rows dropped for missing mandatory fields",
            stream.device_id, audit.rows_dropped, audit.grid_rows
        ));
    }
    Regularized {
        samples,
        audit,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, Timelike};

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 3, 1, 0, 0, 0).unwrap()
    }

    fn ev(min: i64, field: Field, value: f64) -> RawEvent {
        RawEvent {
            timestamp: t0() + Duration::minutes(min),
            field,
            value,
        }
    }

    fn thm(min: i64) -> Vec<RawEvent> {
        vec![ev(min, Field::Temperature, 25.0), ev(min, Field::Humidity, 60.0)]
    }

    #[test]
    fn forward_fill_from_previous_window() {
        let mut events = vec![ev(10, Field::Pm25, 40.0), ev(125, Field::Pm25, 70.0)];
        events.extend(thm(10));
        events.extend(thm(125));
        let out = regularize(&RawStream::new("d", events), &GridConfig::default());
        let hours: Vec<u32> = out.samples.iter().map(|s| s.timestamp.hour()).collect();
        assert_eq!(hours, vec![1, 2]);
        assert!(out.samples.iter().all(|s| s.pm25 == Some(40.0)));
        assert_eq!(out.audit.fields[&Field::Pm25], FieldAudit { observed: 1, filled: 1 });
    }

    #[test]
    fn single_event_on_and_off_grid() {
        let mut on = vec![ev(60, Field::Pm25, 5.0)];
        on.extend(thm(60));
        assert_eq!(regularize(&RawStream::new("d", on), &GridConfig::default()).samples.len(), 1);

        let mut off = vec![ev(61, Field::Pm25, 5.0)];
        off.extend(thm(61));
        let out = regularize(&RawStream::new("d", off), &GridConfig::default());
        assert!(out.samples.is_empty());
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn rows_before_first_mandatory_observation_dropped() {
        let mut events = Vec::new();
        for h in 0..10 {
            events.push(ev(h * 60, Field::Pm25, 30.0 + h as f64));
            events.push(ev(h * 60, Field::Humidity, 50.0));
            if h >= 5 {
                events.push(ev(h * 60, Field::Temperature, 20.0));
            }
        }
        let out = regularize(&RawStream::new("d", events), &GridConfig::default());
        let hours: Vec<u32> = out.samples.iter().map(|s| s.timestamp.hour()).collect();
        assert_eq!(hours, (5..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_stream_warns() {
        let out = regularize(&RawStream::new("d", vec![]), &GridConfig::default());
        assert!(out.samples.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn long_gap_breaks_series() {
        let mut events = Vec::new();
        for h in [0, 1, 2, 12, 13] {
            events.push(ev(h * 60, Field::Pm25, 10.0));
            events.extend(thm(h * 60));
        }
        let out = regularize(&RawStream::new("d", events), &GridConfig::default());
        let hours: Vec<u32> = out.samples.iter().map(|s| s.timestamp.hour()).collect();
        assert_eq!(hours, vec![0, 1, 2, 12, 13]);

        // a short gap is filled
        let cfg = GridConfig {
            fill_cap: 9,
            ..GridConfig::default()
        };
        let out = regularize(&RawStream::new("d", out_events(&out.samples)), &cfg);
        assert_eq!(out.samples.len(), 14);
        assert_eq!(out.audit.fields[&Field::Temperature].filled, 9);
    }

    fn out_events(samples: &[Sample]) -> Vec<RawEvent> {
        RawStream::from_samples("d", samples).events().to_vec()
    }

    #[test]
    fn duplicates_last_write_wins() {
        let s = RawStream::new("d", vec![ev(0, Field::Pm25, 1.0), ev(0, Field::Pm25, 2.0)]);
        assert_eq!(s.events().len(), 1);
        assert_eq!(s.events()[0].value, 2.0);
    }

    #[test]
    fn optional_pm25_may_be_absent() {
        let cfg = GridConfig {
            require_pm25: false,
            ..GridConfig::default()
        };
        let out = regularize(&RawStream::new("d", thm(0)), &cfg);
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.samples[0].pm25, None);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use chrono::Duration;
    use proptest::prelude::*;

    fn stream() -> impl Strategy<Value = RawStream> {
        proptest::collection::vec((0i64..3000, 0usize..3, 0u8..50), 0..80).prop_map(|evs| {
            let base = Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap();
            let events = evs
                .into_iter()
                .map(|(m, f, v)| RawEvent {
                    timestamp: base + Duration::minutes(m),
                    field: Field::ALL[f],
                    value: v as f64,
                })
                .collect();
            RawStream::new("dev", events)
        })
    }

    fn configs() -> impl Strategy<Value = GridConfig> {
        (1u32..3, 0u32..8, any::<bool>()).prop_map(|(step_hours, fill_cap, require_pm25)| GridConfig {
            step_hours,
            fill_cap,
            require_pm25,
        })
    }

    proptest! {
        #[test]
        fn regularize_is_idempotent(s in stream(), cfg in configs()) {
            let once = regularize(&s, &cfg).samples;
            let twice = regularize(&RawStream::from_samples("dev", &once), &cfg).samples;
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn output_on_grid_and_increasing(s in stream(), cfg in configs()) {
            let out = regularize(&s, &cfg).samples;
            let step = i64::from(cfg.step_hours) * 3600;
            for w in out.windows(2) {
                let d = (w[1].timestamp - w[0].timestamp).num_seconds();
                prop_assert!(d > 0 && d % step == 0);
            }
            for x in &out {
                prop_assert_eq!(x.timestamp.timestamp() % step, 0);
            }
        }

        #[test]
        fn no_value_invented(s in stream(), cfg in configs()) {
            let out = regularize(&s, &cfg).samples;
            for x in &out {
                for f in Field::ALL {
                    if let Some(v) = f.of(x) {
                        prop_assert!(s.events().iter().any(|e| e.field == f && e.value == v && e.timestamp <= x.timestamp));
                    }
                }
            }
        }
    }
}
