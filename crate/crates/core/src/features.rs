//! Encoding of samples into fixed-layout feature rows and sliding windows.
//!
//! Row layout, in order:
//! - continuous (11): nine min-max scaled fields plus wind direction as a
//!   `(sin, cos)` bearing pair
//! - weather type one-hot (8)
//! - temporal (18): hour `(sin, cos)`, activity cluster one-hot (4), month
//!   `(sin, cos)`, season one-hot (3), ISO day-of-week one-hot (7)
//! - spatial (11): the device's land-use profile

use std::f64::consts::TAU;
use std::ops::Range;
use std::sync::Arc;

use chrono::{DateTime, Datelike, Duration, FixedOffset, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{AqiClass, DeviceMeta, Sample};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::spatial::{Category, SpatialProfile};

/// Default window length in hours.
pub const DEFAULT_WINDOW: usize = 18;

pub const SCALED_FIELDS: [&str; 9] = [
    "temperature",
    "humidity",
    "feels_like",
    "temp_min",
    "temp_max",
    "pressure",
    "wind_speed",
    "precipitation",
    "cloud_cover",
];

/// Weather-type vocabulary; the last level absorbs unknown tags.
pub const WEATHER_TYPES: [&str; 8] = [
    "clear",
    "clouds",
    "overcast",
    "haze",
    "mist",
    "rain",
    "thunderstorm",
    "other",
];

pub const CONTINUOUS: Range<usize> = 0..11;
pub const WEATHER: Range<usize> = 11..19;
pub const TEMPORAL: Range<usize> = 19..37;
pub const SPATIAL: Range<usize> = 37..48;
pub const FEATURE_DIM: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivityCluster {
    C1,
    C2,
    C3,
    C4,
}

impl ActivityCluster {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Time-of-day activity bucket for a local hour.
pub fn activity_cluster(local_hour: u32) -> Result<ActivityCluster> {
    Ok(match local_hour {
        0..=6 => ActivityCluster::C1,
        7..=9 => ActivityCluster::C2,
        10..=16 => ActivityCluster::C3,
        17..=23 => ActivityCluster::C4,
        h => return Err(Error::invalid(format!("hour {h} outside 0..=23"))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Season {
    Winter,
    Summer,
    Monsoon,
}

impl Season {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Winter is Nov-Feb, summer Mar-Jun, monsoon Jul-Oct.
pub fn season_of(month: u32) -> Result<Season> {
    Ok(match month {
        11 | 12 | 1 | 2 => Season::Winter,
        3..=6 => Season::Summer,
        7..=10 => Season::Monsoon,
        m => return Err(Error::invalid(format!("month {m} outside 1..=12"))),
    })
}

/// Maps a free-text weather tag onto the vocabulary. Returns the level index
/// and whether the tag was recognised.
pub fn weather_level(tag: &str) -> (usize, bool) {
    let t = tag.trim().to_ascii_lowercase();
    let canonical = match t.as_str() {
        "sunny" | "clear sky" | "fair" => "clear",
        "cloudy" | "partly cloudy" | "few clouds" | "scattered clouds" | "broken clouds" => "clouds",
        "hazy" | "smoke" | "dust" => "haze",
        "fog" | "foggy" => "mist",
        "drizzle" | "showers" | "light rain" => "rain",
        "thunder" | "storm" => "thunderstorm",
        other => other,
    };
    match WEATHER_TYPES.iter().position(|w| *w == canonical) {
        Some(i) => (i, true),
        None => (WEATHER_TYPES.len() - 1, false),
    }
}

pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = SCALED_FIELDS[..7].iter().map(|s| s.to_string()).collect();
    names.extend(["wind_dir_sin".into(), "wind_dir_cos".into()]);
    names.extend(SCALED_FIELDS[7..].iter().map(|s| s.to_string()));
    names.extend(WEATHER_TYPES.iter().map(|w| format!("weather_{w}")));
    names.extend(["hour_sin".into(), "hour_cos".into()]);
    names.extend((1..=4).map(|c| format!("cluster_c{c}")));
    names.extend(["month_sin".into(), "month_cos".into()]);
    names.extend(["winter", "summer", "monsoon"].iter().map(|s| format!("season_{s}")));
    names.extend(
        ["mon", "tue", "wed", "thu", "fri", "sat", "sun"]
            .iter()
            .map(|d| format!("dow_{d}")),
    );
    names.extend(Category::ALL.iter().map(|c| format!("spatial_{}", c.name())));
    debug_assert_eq!(names.len(), FEATURE_DIM);
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledFeature {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub version: u32,
    pub features: Vec<ScaledFeature>,
}

impl ScalerState {
    pub const VERSION: u32 = 1;
    pub const CLAMP: (f64, f64) = (-0.5, 1.5);

    pub fn scale(&self, idx: usize, x: f64) -> f64 {
        let f = &self.features[idx];
        if f.max <= f.min {
            return 0.5;
        }
        ((x - f.min) / (f.max - f.min)).clamp(Self::CLAMP.0, Self::CLAMP.1)
    }
}

fn scaled_values(s: &Sample) -> Result<[f64; 9]> {
    let m = s
        .met
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{} @ {}: weather fields missing", s.device_id, s.timestamp)))?;
    Ok([
        s.temperature,
        s.humidity,
        m.feels_like,
        m.temp_min,
        m.temp_max,
        m.pressure,
        m.wind_speed,
        m.precipitation,
        m.cloud_cover,
    ])
}

/// Per-field min/max over the training rows.
pub fn fit_scaler<'a>(train: impl IntoIterator<Item = &'a Sample>) -> Result<ScalerState> {
    let mut lo = [f64::INFINITY; 9];
    let mut hi = [f64::NEG_INFINITY; 9];
    let mut n = 0usize;
    for s in train {
        for (i, v) in scaled_values(s)?.into_iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("scaler training rows"));
    }
    Ok(ScalerState {
        version: ScalerState::VERSION,
        features: SCALED_FIELDS
            .iter()
            .enumerate()
            .map(|(i, name)| ScaledFeature {
                name: name.to_string(),
                min: lo[i],
                max: hi[i],
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Local time = UTC + this offset; drives hour, cluster, season, weekday.
    pub utc_offset_minutes: i32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            utc_offset_minutes: 330,
        }
    }
}

impl FeatureConfig {
    pub fn local(&self, ts: DateTime<Utc>) -> DateTime<FixedOffset> {
        let off = FixedOffset::east_opt(self.utc_offset_minutes * 60).expect("offset within a day");
        ts.with_timezone(&off)
    }
}

/// One encoded hour, see the module docs for the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow(Vec<f64>);

impl FeatureRow {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_DIM {
            return Err(Error::ShapeMismatch {
                expected: format!("{FEATURE_DIM} features"),
                got: values.len().to_string(),
            });
        }
        Ok(FeatureRow(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn push_cyclic(out: &mut Vec<f64>, k: f64, period: f64) {
    let a = TAU * k / period;
    out.push(a.sin());
    out.push(a.cos());
}

fn push_one_hot(out: &mut Vec<f64>, idx: usize, n: usize) {
    out.extend((0..n).map(|i| if i == idx { 1.0 } else { 0.0 }));
}

pub fn encode_row(
    sample: &Sample,
    profile: &SpatialProfile,
    scaler: &ScalerState,
    cfg: &FeatureConfig,
) -> Result<FeatureRow> {
    let raw = scaled_values(sample)?;
    let met = sample.met.as_ref().expect("checked by scaled_values");
    let mut v = Vec::with_capacity(FEATURE_DIM);
    for (i, x) in raw[..7].iter().enumerate() {
        v.push(scaler.scale(i, *x));
    }
    let bearing = met.wind_direction.to_radians();
    v.push(bearing.sin());
    v.push(bearing.cos());
    for (i, x) in raw[7..].iter().enumerate() {
        v.push(scaler.scale(7 + i, *x));
    }

    push_one_hot(&mut v, weather_level(&met.weather_type).0, WEATHER_TYPES.len());

    let local = cfg.local(sample.timestamp);
    push_cyclic(&mut v, local.hour() as f64, 24.0);
    push_one_hot(&mut v, activity_cluster(local.hour())?.index(), 4);
    push_cyclic(&mut v, local.month0() as f64, 12.0);
    push_one_hot(&mut v, season_of(local.month())?.index(), 3);
    push_one_hot(&mut v, local.weekday().num_days_from_monday() as usize, 7);

    v.extend_from_slice(profile.fractions());
    debug_assert_eq!(v.len(), FEATURE_DIM);
    Ok(FeatureRow(v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRow {
    pub timestamp: DateTime<Utc>,
    pub features: FeatureRow,
    pub label: AqiClass,
}

/// Encoded labeled rows of one device, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRows {
    pub device_id: String,
    pub rows: Vec<EncodedRow>,
    /// Rows whose weather tag fell back to the `other` level.
    pub unknown_weather: usize,
}

/// Encodes every labeled sample of a device. Unlabeled rows are skipped and
/// therefore break the hourly series.
pub fn encode_device(
    samples: &[Sample],
    meta: &DeviceMeta,
    scaler: &ScalerState,
    cfg: &FeatureConfig,
) -> Result<DeviceRows> {
    let profile = meta.profile()?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut unknown = 0;
    for s in samples {
        let Some(label) = s.label() else { continue };
        if let Some(m) = &s.met {
            if !weather_level(&m.weather_type).1 {
                unknown += 1;
            }
        }
        rows.push(EncodedRow {
            timestamp: s.timestamp,
            features: encode_row(s, profile, scaler, cfg)?,
            label,
        });
    }
    if unknown > 0 {
        log::warn!("{}: {unknown} rows with unknown weather type mapped to `other`", meta.device_id);
    }
    Ok(DeviceRows {
        device_id: meta.device_id.clone(),
        rows,
        unknown_weather: unknown,
    })
}

/// Index ranges of maximal runs of consecutive hourly rows.
pub fn segments(rows: &[EncodedRow]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        let breaks = i == rows.len() || rows[i].timestamp - rows[i - 1].timestamp != Duration::hours(1);
        if breaks {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

/// `T` consecutive rows of one device; the label is that of the last row.
#[derive(Debug, Clone)]
pub struct WindowInstance {
    series: Arc<DeviceRows>,
    start: usize,
    len: usize,
}

impl WindowInstance {
    pub fn device_id(&self) -> &str {
        &self.series.device_id
    }

    pub fn rows(&self) -> &[EncodedRow] {
        &self.series.rows[self.start..self.start + self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn step(&self, t: usize) -> &[f64] {
        self.rows()[t].features.as_slice()
    }

    pub fn steps(&self) -> Vec<&[f64]> {
        self.rows().iter().map(|r| r.features.as_slice()).collect()
    }

    pub fn last(&self) -> &EncodedRow {
        &self.series.rows[self.start + self.len - 1]
    }

    pub fn label(&self) -> AqiClass {
        self.last().label
    }

    pub fn end_timestamp(&self) -> DateTime<Utc> {
        self.last().timestamp
    }
}

/// Stride-1 windows of length `t` inside each contiguous segment.
pub fn build_windows(series: &Arc<DeviceRows>, t: usize) -> Result<Vec<WindowInstance>> {
    if t == 0 {
        return Err(Error::invalid("window length must be >= 1"));
    }
    let mut out = Vec::new();
    let mut short = 0;
    for seg in segments(&series.rows) {
        if seg.len() < t {
            short += 1;
            continue;
        }
        for start in seg.start..=seg.end - t {
            out.push(WindowInstance {
                series: Arc::clone(series),
                start,
                len: t,
            });
        }
    }
    if short > 0 {
        log::debug!("{}: {short} segments shorter than T={t} skipped", series.device_id);
    }
    Ok(out)
}

/// Random-forest input: the final row of the window, without the temporal
/// block unless `temporal` is set.
pub fn flatten_for_rf(instance: &WindowInstance, temporal: bool) -> Vec<f64> {
    select_rf_features(instance.last().features.as_slice(), temporal)
}

pub fn select_rf_features(row: &[f64], temporal: bool) -> Vec<f64> {
    if temporal {
        row.to_vec()
    } else {
        row[..TEMPORAL.start]
            .iter()
            .chain(&row[TEMPORAL.end..])
            .copied()
            .collect()
    }
}

pub fn rf_dim(temporal: bool) -> usize {
    if temporal {
        FEATURE_DIM
    } else {
        FEATURE_DIM - TEMPORAL.len()
    }
}

/// Everything needed to re-encode inputs the way a model was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub version: u32,
    pub feature_names: Vec<String>,
    pub weather_types: Vec<String>,
    pub scaler: ScalerState,
    pub window: usize,
    pub city_tag: String,
    pub utc_offset_minutes: i32,
}

impl FeatureManifest {
    pub fn new(scaler: ScalerState, window: usize, city_tag: impl Into<String>, cfg: FeatureConfig) -> Self {
        FeatureManifest {
            version: 1,
            feature_names: feature_names(),
            weather_types: WEATHER_TYPES.iter().map(|s| s.to_string()).collect(),
            scaler,
            window,
            city_tag: city_tag.into(),
            utc_offset_minutes: cfg.utc_offset_minutes,
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            utc_offset_minutes: self.utc_offset_minutes,
        }
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }

    pub fn scaler_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.scaler).expect("scaler serializes"))
    }
}

/// Writes encoded rows as CSV: `device_id,timestamp,label,<feature names>`.
pub fn write_encoded(w: impl std::io::Write, devices: &[DeviceRows]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["device_id".to_string(), "timestamp".into(), "label".into()];
    header.extend(feature_names());
    wtr.write_record(&header)?;
    for d in devices {
        for r in &d.rows {
            let mut rec = vec![
                d.device_id.clone(),
                crate::io::format_ts(r.timestamp),
                r.label.value().to_string(),
            ];
            rec.extend(r.features.as_slice().iter().map(|x| x.to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<encoded>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::MetRecord;
    use approx::assert_abs_diff_eq;
    use chrono::TimeZone;

    pub(crate) fn sample_at(ts: DateTime<Utc>, temp: f64, pm25: f64) -> Sample {
        Sample {
            device_id: "d".into(),
            timestamp: ts,
            pm25: Some(pm25),
            temperature: temp,
            humidity: 55.0,
            met: Some(MetRecord {
                feels_like: temp + 1.0,
                temp_min: temp - 1.0,
                temp_max: temp + 2.0,
                pressure: 1010.0,
                wind_speed: 2.0,
                wind_direction: 90.0,
                precipitation: 0.0,
                cloud_cover: 20.0,
                weather_type: "Haze".into(),
            }),
        }
    }

    fn utc_cfg() -> FeatureConfig {
        FeatureConfig { utc_offset_minutes: 0 }
    }

    #[test]
    fn activity_cluster_examples() {
        assert_eq!(activity_cluster(8).unwrap(), ActivityCluster::C2);
        assert_eq!(activity_cluster(0).unwrap(), ActivityCluster::C1);
        assert_eq!(activity_cluster(17).unwrap(), ActivityCluster::C4);
        assert!(activity_cluster(24).is_err());
    }

    #[test]
    fn season_examples() {
        assert_eq!(season_of(1).unwrap(), Season::Winter);
        assert_eq!(season_of(5).unwrap(), Season::Summer);
        assert_eq!(season_of(8).unwrap(), Season::Monsoon);
        assert!(season_of(0).is_err());
        assert!(season_of(13).is_err());
    }

    #[test]
    fn scaler_examples() {
        let t = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
        let rows = [sample_at(t, 10.0, 5.0), sample_at(t, 30.0, 5.0)];
        let s = fit_scaler(&rows).unwrap();
        assert_eq!((s.features[0].min, s.features[0].max), (10.0, 30.0));
        assert_eq!(s.scale(0, 20.0), 0.5);
        // pressure is constant
        assert_eq!(s.scale(5, 1010.0), 0.5);
        assert_eq!(s.scale(5, 999.0), 0.5);
        assert_eq!(fit_scaler(&rows).unwrap(), s);
        // out-of-range test values are clamped
        assert_eq!(s.scale(0, 100.0), 1.5);
        assert_eq!(s.scale(0, -100.0), -0.5);
        assert!(fit_scaler(std::iter::empty()).is_err());
    }

    #[test]
    fn encode_row_cyclic_and_one_hot() {
        let ts = Utc.with_ymd_and_hms(2021, 3, 1, 12, 0, 0).unwrap(); // a Monday
        let s = sample_at(ts, 20.0, 40.0);
        let scaler = fit_scaler([&s]).unwrap();
        let row = encode_row(&s, &SpatialProfile::pure(Category::Park), &scaler, &utc_cfg()).unwrap();
        let v = row.as_slice();
        let names = feature_names();
        let at = |n: &str| v[names.iter().position(|x| x == n).unwrap()];
        assert_abs_diff_eq!(at("hour_sin"), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(at("hour_cos"), -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(at("month_sin"), (TAU * 2.0 / 12.0).sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(at("month_cos"), (TAU * 2.0 / 12.0).cos(), epsilon = 1e-12);
        assert_eq!(at("dow_mon"), 1.0);
        assert_eq!(at("weather_haze"), 1.0);
        assert_eq!(at("cluster_c3"), 1.0);
        assert_eq!(at("season_summer"), 1.0);
        assert_eq!(at("spatial_park"), 1.0);
        assert_abs_diff_eq!(at("wind_dir_sin"), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn local_offset_shifts_cluster() {
        // 01:30 UTC is 07:00 at +05:30
        let ts = Utc.with_ymd_and_hms(2021, 3, 1, 1, 30, 0).unwrap();
        let s = sample_at(ts, 20.0, 40.0);
        let scaler = fit_scaler([&s]).unwrap();
        let row = encode_row(&s, &SpatialProfile::pure(Category::Park), &scaler, &FeatureConfig::default()).unwrap();
        assert_eq!(row.as_slice()[TEMPORAL.start + 2 + ActivityCluster::C2.index()], 1.0);
    }

    #[test]
    fn unknown_weather_maps_to_other() {
        assert_eq!(weather_level("volcanic ash"), (7, false));
        assert_eq!(weather_level("Sunny"), (0, true));
    }

    fn series(hours: &[i64]) -> Arc<DeviceRows> {
        let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
        Arc::new(DeviceRows {
            device_id: "d".into(),
            rows: hours
                .iter()
                .map(|&h| EncodedRow {
                    timestamp: t0 + Duration::hours(h),
                    features: FeatureRow(vec![h as f64; FEATURE_DIM]),
                    label: AqiClass::new(1 + (h % 5) as u8).unwrap(),
                })
                .collect(),
            unknown_weather: 0,
        })
    }

    #[test]
    fn window_counts() {
        let s20: Vec<i64> = (0..20).collect();
        assert_eq!(build_windows(&series(&s20), 18).unwrap().len(), 3);
        let s18: Vec<i64> = (0..18).collect();
        assert_eq!(build_windows(&series(&s18), 18).unwrap().len(), 1);
        let two: Vec<i64> = (0..10).chain(20..30).collect();
        assert_eq!(build_windows(&series(&two), 18).unwrap().len(), 0);
        assert!(build_windows(&series(&two), 0).is_err());
    }

    #[test]
    fn window_label_is_last_row() {
        let s: Vec<i64> = (0..5).collect();
        let w = build_windows(&series(&s), 3).unwrap();
        assert_eq!(w[0].label(), AqiClass::new(3).unwrap());
        assert_eq!(w[0].step(0)[0], 0.0);
        assert_eq!(w[2].end_timestamp(), series(&s).rows[4].timestamp);
    }

    #[test]
    fn rf_flattening() {
        let s: Vec<i64> = (0..5).collect();
        let w = &build_windows(&series(&s), 3).unwrap()[1];
        let with = flatten_for_rf(w, true);
        let without = flatten_for_rf(w, false);
        assert_eq!(without.len() + TEMPORAL.len(), with.len());
        assert_eq!(with, w.step(2));
        assert_eq!(flatten_for_rf(w, false), without);
        assert_eq!(without.len(), rf_dim(false));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::domain::MetRecord;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn arb_sample() -> impl Strategy<Value = Sample> {
        (0i64..24 * 400, -5.0f64..45.0, 0.0f64..100.0, 0.0f64..360.0, 0usize..9).prop_map(|(h, t, hum, wd, wt)| {
            let tags = ["clear", "clouds", "overcast", "haze", "mist", "rain", "thunderstorm", "sunny", "??"];
            Sample {
                device_id: "d".into(),
                timestamp: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap() + Duration::hours(h),
                pm25: Some(50.0),
                temperature: t,
                humidity: hum,
                met: Some(MetRecord {
                    feels_like: t + 2.0,
                    temp_min: t - 1.0,
                    temp_max: t + 1.0,
                    pressure: 1000.0 + hum / 10.0,
                    wind_speed: hum / 20.0,
                    wind_direction: wd,
                    precipitation: 0.0,
                    cloud_cover: hum,
                    weather_type: tags[wt].into(),
                }),
            }
        })
    }

    proptest! {
        #[test]
        fn window_count_formula(
            seg_lens in proptest::collection::vec(0usize..40, 1..5),
            gaps in proptest::collection::vec(2i64..5, 5),
            t in 1usize..25,
        ) {
            let mut hours = Vec::new();
            let mut h = 0i64;
            for (i, &l) in seg_lens.iter().enumerate() {
                for _ in 0..l {
                    hours.push(h);
                    h += 1;
                }
                h += gaps[i];
            }
            let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
            let rows = hours.iter().map(|&h| EncodedRow {
                timestamp: t0 + Duration::hours(h),
                features: FeatureRow(vec![0.0; FEATURE_DIM]),
                label: AqiClass::new(1).unwrap(),
            }).collect();
            let s = Arc::new(DeviceRows { device_id: "d".into(), rows, unknown_weather: 0 });
            let expect: usize = seg_lens.iter().map(|&l| if l >= t { l - t + 1 } else { 0 }).sum();
            let w = build_windows(&s, t).unwrap();
            prop_assert_eq!(w.len(), expect);
            for inst in &w {
                let r = inst.rows();
                for p in r.windows(2) {
                    prop_assert_eq!(p[1].timestamp - p[0].timestamp, Duration::hours(1));
                }
            }
        }

        #[test]
        fn encoding_invariants(samples in proptest::collection::vec(arb_sample(), 1..30)) {
            let scaler = fit_scaler(&samples).unwrap();
            let profile = SpatialProfile::pure(Category::Water);
            for s in &samples {
                let a = encode_row(s, &profile, &scaler, &FeatureConfig::default()).unwrap();
                let b = encode_row(s, &profile, &scaler, &FeatureConfig::default()).unwrap();
                prop_assert_eq!(
                    a.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    b.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
                let v = a.as_slice();
                // scaled values of training rows stay in [0, 1]
                for i in (0..7).chain(9..11) {
                    prop_assert!((0.0..=1.0).contains(&v[i]));
                }
                for group in [WEATHER, 21..25, 27..30, 30..37] {
                    prop_assert_eq!(v[group].iter().sum::<f64>(), 1.0);
                }
                for pair in [7usize, 19, 25] {
                    prop_assert!((v[pair].powi(2) + v[pair + 1].powi(2) - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
}
