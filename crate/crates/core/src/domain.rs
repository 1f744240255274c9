//! Shared vocabulary: AQI classes, samples, device metadata and the dataset
//! container, plus the PM2.5 binning rule every label is derived from.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Duration, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::SpatialProfile;

/// Number of AQI classes handled by the system.
pub const N_CLASSES: usize = 5;

/// Upper PM2.5 bound (inclusive, µg/m³) of each class, in order.
pub const CLASS_UPPER_BOUNDS: [f64; N_CLASSES] = [30.0, 60.0, 90.0, 120.0, 250.0];

/// Ordinal AQI class, 1 (Good) through 5 (Very Poor).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct AqiClass(u8);

impl AqiClass {
    pub const ALL: [AqiClass; N_CLASSES] = [
        AqiClass(1),
        AqiClass(2),
        AqiClass(3),
        AqiClass(4),
        AqiClass(5),
    ];

    pub fn new(value: u8) -> Result<Self> {
        if (1..=N_CLASSES as u8).contains(&value) {
            Ok(AqiClass(value))
        } else {
            Err(Error::invalid(format!("AQI class {value} outside 1..=5")))
        }
    }

    /// Zero-based index, suitable for probability vectors.
    pub fn from_index(index: usize) -> Result<Self> {
        Self::new(index as u8 + 1)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            1 => "Good",
            2 => "Satisfactory",
            3 => "Moderately Polluted",
            4 => "Poor",
            _ => "Very Poor",
        }
    }
}

impl TryFrom<u8> for AqiClass {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        AqiClass::new(value)
    }
}

impl From<AqiClass> for u8 {
    fn from(c: AqiClass) -> u8 {
        c.0
    }
}

impl fmt::Display for AqiClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AQI {}", self.0)
    }
}

/// Outcome of binning a PM2.5 concentration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binned {
    Class(AqiClass),
    /// Above the last band; such rows are dropped rather than clamped.
    Excluded,
}

impl Binned {
    pub fn class(self) -> Option<AqiClass> {
        match self {
            Binned::Class(c) => Some(c),
            Binned::Excluded => None,
        }
    }
}

/// Bins PM2.5 (µg/m³) into an AQI class using upper-inclusive bands
/// `[0,30], (30,60], (60,90], (90,120], (120,250]`.
pub fn bin_aqi(pm25: f64) -> Result<Binned> {
    if !pm25.is_finite() || pm25 < 0.0 {
        return Err(Error::invalid(format!("pm25 must be finite and >= 0, got {pm25}")));
    }
    Ok(CLASS_UPPER_BOUNDS
        .iter()
        .position(|&upper| pm25 <= upper)
        .map(|i| Binned::Class(AqiClass(i as u8 + 1)))
        .unwrap_or(Binned::Excluded))
}

/// Meteorological fields crawled from a public weather source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetRecord {
    pub feels_like: f64,
    pub temp_min: f64,
    pub temp_max: f64,
    /// hPa
    pub pressure: f64,
    /// m/s
    pub wind_speed: f64,
    /// Degrees, `[0, 360)`.
    pub wind_direction: f64,
    /// mm/h
    pub precipitation: f64,
    /// Percent, `[0, 100]`.
    pub cloud_cover: f64,
    pub weather_type: String,
}

/// One timestamped record for a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub device_id: String,
    pub timestamp: DateTime<Utc>,
    pub pm25: Option<f64>,
    pub temperature: f64,
    pub humidity: f64,
    pub met: Option<MetRecord>,
}

impl Sample {
    /// AQI label of this row, if it has a PM2.5 reading inside the five bands.
    pub fn label(&self) -> Option<AqiClass> {
        self.pm25.and_then(|v| bin_aqi(v).ok()).and_then(Binned::class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMeta {
    pub device_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub city_tag: String,
    pub spatial_profile: Option<SpatialProfile>,
}

impl DeviceMeta {
    pub fn validate(&self) -> Result<()> {
        check_coordinates(self.latitude, self.longitude)
    }

    pub fn profile(&self) -> Result<&SpatialProfile> {
        self.spatial_profile.as_ref().ok_or_else(|| {
            Error::Validation(format!("device {} has no spatial profile", self.device_id))
        })
    }
}

pub(crate) fn check_coordinates(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::invalid(format!("coordinates ({lat}, {lon}) out of range")));
    }
    Ok(())
}

/// Devices plus their time-ordered samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    devices: Vec<DeviceMeta>,
    series: BTreeMap<String, Vec<Sample>>,
}

impl Dataset {
    /// Groups samples by device and sorts each group by timestamp. Devices are
    /// kept in id order.
    pub fn new(mut devices: Vec<DeviceMeta>, samples: Vec<Sample>) -> Self {
        devices.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        let mut series: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
        for d in &devices {
            series.entry(d.device_id.clone()).or_default();
        }
        for s in samples {
            series.entry(s.device_id.clone()).or_default().push(s);
        }
        for rows in series.values_mut() {
            rows.sort_by_key(|s| s.timestamp);
        }
        Dataset { devices, series }
    }

    pub fn devices(&self) -> &[DeviceMeta] {
        &self.devices
    }

    pub fn device(&self, id: &str) -> Option<&DeviceMeta> {
        self.devices.iter().find(|d| d.device_id == id)
    }

    pub fn device_ids(&self) -> Vec<String> {
        self.devices.iter().map(|d| d.device_id.clone()).collect()
    }

    pub fn samples(&self, id: &str) -> &[Sample] {
        self.series.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn series(&self) -> impl Iterator<Item = (&str, &[Sample])> {
        self.series.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn n_samples(&self) -> usize {
        self.series.values().map(Vec::len).sum()
    }

    /// Restricts the dataset to the given device ids.
    pub fn subset(&self, ids: &[String]) -> Dataset {
        let devices = self
            .devices
            .iter()
            .filter(|d| ids.contains(&d.device_id))
            .cloned()
            .collect();
        let series = self
            .series
            .iter()
            .filter(|(k, _)| ids.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Dataset { devices, series }
    }

    /// Drops rows whose PM2.5 falls outside the five bands. Returns the
    /// number of rows removed.
    pub fn drop_excluded(&mut self) -> usize {
        let mut dropped = 0;
        for rows in self.series.values_mut() {
            let before = rows.len();
            rows.retain(|s| !matches!(s.pm25.map(bin_aqi), Some(Ok(Binned::Excluded))));
            dropped += before - rows.len();
        }
        dropped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    /// First missing grid hour of a gap.
    Gap,
    Unordered,
    OffGrid,
    OutOfRange { field: &'static str, value: f64 },
    ExcludedLabel { pm25: f64 },
    UnknownDevice,
    BadCoordinates,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub device_id: String,
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl Violation {
    /// Gaps only split a series into segments; everything else makes the
    /// dataset unusable for training.
    pub fn is_fatal(&self) -> bool {
        !matches!(self.kind, ViolationKind::Gap)
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.device_id)?;
        if let Some(ts) = self.timestamp {
            write!(f, " @ {}", ts.to_rfc3339())?;
        }
        match &self.kind {
            ViolationKind::Gap => write!(f, ": gap in hourly grid"),
            ViolationKind::Unordered => write!(f, ": timestamps not strictly increasing"),
            ViolationKind::OffGrid => write!(f, ": timestamp not on the hourly grid"),
            ViolationKind::OutOfRange { field, value } => {
                write!(f, ": {field} = {value} out of range")
            }
            ViolationKind::ExcludedLabel { pm25 } => {
                write!(f, ": pm25 = {pm25} above the last AQI band")
            }
            ViolationKind::UnknownDevice => write!(f, ": samples for unknown device"),
            ViolationKind::BadCoordinates => write!(f, ": coordinates out of range"),
        }
    }
}

/// Reports every invariant violation in the dataset. An empty list means the
/// dataset is valid.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    for d in &ds.devices {
        if d.validate().is_err() {
            out.push(Violation {
                device_id: d.device_id.clone(),
                timestamp: None,
                kind: ViolationKind::BadCoordinates,
            });
        }
    }
    for (id, rows) in &ds.series {
        if ds.device(id).is_none() {
            out.push(Violation {
                device_id: id.clone(),
                timestamp: None,
                kind: ViolationKind::UnknownDevice,
            });
        }
        let mut prev: Option<DateTime<Utc>> = None;
        for s in rows {
            let v = |kind| Violation {
                device_id: id.clone(),
                timestamp: Some(s.timestamp),
                kind,
            };
            if s.timestamp.minute() != 0 || s.timestamp.second() != 0 || s.timestamp.nanosecond() != 0 {
                out.push(v(ViolationKind::OffGrid));
            }
            if let Some(p) = prev {
                if s.timestamp <= p {
                    out.push(v(ViolationKind::Unordered));
                } else if s.timestamp - p > Duration::hours(1) {
                    out.push(Violation {
                        device_id: id.clone(),
                        timestamp: Some(p + Duration::hours(1)),
                        kind: ViolationKind::Gap,
                    });
                }
            }
            prev = Some(s.timestamp);
            for (field, value, ok) in field_checks(s) {
                if !ok {
                    out.push(v(ViolationKind::OutOfRange { field, value }));
                }
            }
            if let Some(pm) = s.pm25 {
                if pm.is_finite() && pm > CLASS_UPPER_BOUNDS[N_CLASSES - 1] {
                    out.push(v(ViolationKind::ExcludedLabel { pm25: pm }));
                }
            }
        }
    }
    out
}

fn field_checks(s: &Sample) -> Vec<(&'static str, f64, bool)> {
    let pct = |x: f64| (0.0..=100.0).contains(&x);
    let mut checks = vec![
        ("temperature", s.temperature, s.temperature.is_finite()),
        ("humidity", s.humidity, pct(s.humidity)),
    ];
    if let Some(pm) = s.pm25 {
        checks.push(("pm25", pm, pm.is_finite() && pm >= 0.0));
    }
    if let Some(m) = &s.met {
        checks.push(("cloud_cover", m.cloud_cover, pct(m.cloud_cover)));
        checks.push((
            "wind_direction",
            m.wind_direction,
            (0.0..360.0).contains(&m.wind_direction),
        ));
        checks.push(("wind_speed", m.wind_speed, m.wind_speed.is_finite() && m.wind_speed >= 0.0));
        checks.push((
            "precipitation",
            m.precipitation,
            m.precipitation.is_finite() && m.precipitation >= 0.0,
        ));
        for (name, v) in [
            ("feels_like", m.feels_like),
            ("temp_min", m.temp_min),
            ("temp_max", m.temp_max),
            ("pressure", m.pressure),
        ] {
            checks.push((name, v, v.is_finite()));
        }
    }
    checks
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binning_is_monotone(a in 0.0f64..=250.0, b in 0.0f64..=250.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let cl = bin_aqi(lo).unwrap().class().unwrap();
            let ch = bin_aqi(hi).unwrap().class().unwrap();
            prop_assert!(cl <= ch);
        }

        #[test]
        fn binning_is_total_above_zero(x in 0.0f64..1e6) {
            let b = bin_aqi(x).unwrap();
            prop_assert_eq!(b == Binned::Excluded, x > 250.0);
        }
    }
}
