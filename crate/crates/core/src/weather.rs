//! Weather lookups behind a provider interface, with a CSV fixture backend,
//! a per-(coordinate, hour) cache and forward-filling attachment to samples.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::thread;
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, DurationRound, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::domain::{DeviceMeta, MetRecord, Sample};
use crate::error::{Error, Result};
use crate::io::{format_ts, parse_ts};

/// Source of crawled meteorology. `Ok(None)` means the hour cannot be served;
/// `Err` is a transient failure worth retrying.
pub trait WeatherProvider: Send + Sync {
    fn lookup(&self, lat: f64, lon: f64, hour: DateTime<Utc>) -> Result<Option<MetRecord>>;
}

impl<P: WeatherProvider + ?Sized> WeatherProvider for std::sync::Arc<P> {
    fn lookup(&self, lat: f64, lon: f64, hour: DateTime<Utc>) -> Result<Option<MetRecord>> {
        (**self).lookup(lat, lon, hour)
    }
}

/// Coordinates rounded to two decimals plus the hour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WeatherKey {
    lat_centi: i32,
    lon_centi: i32,
    hour: i64,
}

impl WeatherKey {
    pub fn new(lat: f64, lon: f64, ts: DateTime<Utc>) -> Self {
        WeatherKey {
            lat_centi: (lat * 100.0).round() as i32,
            lon_centi: (lon * 100.0).round() as i32,
            hour: ts.timestamp().div_euclid(3600),
        }
    }
}

pub fn floor_hour(ts: DateTime<Utc>) -> DateTime<Utc> {
    ts.duration_trunc(Duration::hours(1)).expect("hour truncation in range")
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureRow {
    lat: f64,
    lon: f64,
    timestamp: String,
    feels_like: f64,
    temp_min: f64,
    temp_max: f64,
    pressure: f64,
    wind_speed: f64,
    wind_direction: f64,
    precipitation: f64,
    cloud_cover: f64,
    weather_type: String,
}

/// Deterministic provider backed by a CSV fixture with columns
/// `lat,lon,timestamp,feels_like,temp_min,temp_max,pressure,wind_speed,wind_direction,precipitation,cloud_cover,weather_type`.
#[derive(Debug, Clone, Default)]
pub struct FixtureWeather {
    records: HashMap<WeatherKey, MetRecord>,
}

impl FixtureWeather {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lat: f64, lon: f64, hour: DateTime<Utc>, met: MetRecord) {
        self.records.insert(WeatherKey::new(lat, lon, hour), met);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut out = FixtureWeather::new();
        for row in rdr.deserialize() {
            let row: FixtureRow = row?;
            let ts = parse_ts(&row.timestamp)?;
            out.insert(
                row.lat,
                row.lon,
                ts,
                MetRecord {
                    feels_like: row.feels_like,
                    temp_min: row.temp_min,
                    temp_max: row.temp_max,
                    pressure: row.pressure,
                    wind_speed: row.wind_speed,
                    wind_direction: row.wind_direction,
                    precipitation: row.precipitation,
                    cloud_cover: row.cloud_cover,
                    weather_type: row.weather_type,
                },
            );
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    /// Writes rows sorted by key so output is byte-stable.
    pub fn write(&self, w: impl Write) -> Result<()> {
        let mut keys: Vec<&WeatherKey> = self.records.keys().collect();
        keys.sort();
        let mut wtr = csv::Writer::from_writer(w);
        for k in keys {
            let m = &self.records[k];
            let ts = DateTime::from_timestamp(k.hour * 3600, 0).expect("hour in range");
            wtr.serialize(FixtureRow {
                lat: k.lat_centi as f64 / 100.0,
                lon: k.lon_centi as f64 / 100.0,
                timestamp: format_ts(ts),
                feels_like: m.feels_like,
                temp_min: m.temp_min,
                temp_max: m.temp_max,
                pressure: m.pressure,
                wind_speed: m.wind_speed,
                wind_direction: m.wind_direction,
                precipitation: m.precipitation,
                cloud_cover: m.cloud_cover,
                weather_type: m.weather_type.clone(),
            })?;
        }
        wtr.flush().map_err(|e| Error::io("<weather fixture>", e))?;
        Ok(())
    }
}

impl WeatherProvider for FixtureWeather {
    fn lookup(&self, lat: f64, lon: f64, hour: DateTime<Utc>) -> Result<Option<MetRecord>> {
        Ok(self.records.get(&WeatherKey::new(lat, lon, hour)).cloned())
    }
}

/// Memoizes successful lookups (including "not served") per key.
pub struct CachedProvider<P> {
    inner: P,
    cache: Mutex<HashMap<WeatherKey, Option<MetRecord>>>,
}

impl<P: WeatherProvider> CachedProvider<P> {
    pub fn new(inner: P) -> Self {
        CachedProvider {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().len()
    }
}

impl<P: WeatherProvider> WeatherProvider for CachedProvider<P> {
    fn lookup(&self, lat: f64, lon: f64, hour: DateTime<Utc>) -> Result<Option<MetRecord>> {
        let key = WeatherKey::new(lat, lon, hour);
        if let Some(hit) = self.cache.lock().get(&key) {
            return Ok(hit.clone());
        }
        let v = self.inner.lookup(lat, lon, hour)?;
        self.cache.lock().insert(key, v.clone());
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            backoff_ms: 200,
        }
    }
}

pub fn lookup_with_retry(
    provider: &dyn WeatherProvider,
    lat: f64,
    lon: f64,
    hour: DateTime<Utc>,
    retry: &RetryPolicy,
) -> Result<Option<MetRecord>> {
    let mut delay = retry.backoff_ms;
    let mut attempt = 0;
    loop {
        match provider.lookup(lat, lon, hour) {
            Ok(v) => return Ok(v),
            Err(e) if attempt + 1 >= retry.attempts.max(1) => return Err(e),
            Err(_) => {
                if delay > 0 {
                    thread::sleep(StdDuration::from_millis(delay));
                }
                delay = delay.saturating_mul(2);
                attempt += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HourError {
    pub timestamp: DateTime<Utc>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attached {
    pub samples: Vec<Sample>,
    /// Hours served from the previous hour's record.
    pub filled: usize,
    /// Rows removed: leading unservable hours and runs past the fill cap.
    pub dropped: usize,
    pub errors: Vec<HourError>,
}

/// Populates `met` on every sample. Unservable hours reuse the last served
/// record for at most `fill_cap` hours; rows with no usable record are dropped.
pub fn attach_weather(
    samples: &[Sample],
    meta: &DeviceMeta,
    provider: &dyn WeatherProvider,
    fill_cap: u32,
    retry: &RetryPolicy,
) -> Attached {
    let mut out = Attached {
        samples: Vec::with_capacity(samples.len()),
        filled: 0,
        dropped: 0,
        errors: Vec::new(),
    };
    let mut last: Option<(DateTime<Utc>, MetRecord)> = None;
    for s in samples {
        let hour = floor_hour(s.timestamp);
        let served = match lookup_with_retry(provider, meta.latitude, meta.longitude, hour, retry) {
            Ok(v) => v,
            Err(e) => {
                out.errors.push(HourError {
                    timestamp: hour,
                    message: e.to_string(),
                });
                None
            }
        };
        let met = match served {
            Some(m) => {
                last = Some((hour, m.clone()));
                Some(m)
            }
            None => match &last {
                Some((at, m)) if hour - *at <= Duration::hours(i64::from(fill_cap)) => {
                    out.filled += 1;
                    Some(m.clone())
                }
                _ => None,
            },
        };
        match met {
            Some(m) => out.samples.push(Sample {
                met: Some(m),
                ..s.clone()
            }),
            None => out.dropped += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn t(h: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap() + Duration::hours(h)
    }

    fn met(p: f64) -> MetRecord {
        MetRecord {
            feels_like: 20.0,
            temp_min: 18.0,
            temp_max: 22.0,
            pressure: p,
            wind_speed: 2.0,
            wind_direction: 90.0,
            precipitation: 0.0,
            cloud_cover: 10.0,
            weather_type: "clear".into(),
        }
    }

    fn meta() -> DeviceMeta {
        DeviceMeta {
            device_id: "d".into(),
            latitude: 23.521,
            longitude: 87.312,
            city_tag: "x".into(),
            spatial_profile: None,
        }
    }

    fn samples(n: i64) -> Vec<Sample> {
        (0..n)
            .map(|h| Sample {
                device_id: "d".into(),
                timestamp: t(h),
                pm25: Some(10.0),
                temperature: 20.0,
                humidity: 50.0,
                met: None,
            })
            .collect()
    }

    fn fixture(hours: impl Iterator<Item = i64>) -> FixtureWeather {
        let mut f = FixtureWeather::new();
        for h in hours {
            f.insert(23.52, 87.31, t(h), met(1000.0 + h as f64));
        }
        f
    }

    const NO_RETRY: RetryPolicy = RetryPolicy {
        attempts: 1,
        backoff_ms: 0,
    };

    #[test]
    fn full_fixture_needs_no_fill() {
        let a = attach_weather(&samples(12), &meta(), &fixture(0..12), 6, &NO_RETRY);
        assert_eq!((a.filled, a.dropped, a.samples.len()), (0, 0, 12));
    }

    #[test]
    fn missing_hour_copies_previous() {
        let a = attach_weather(&samples(12), &meta(), &fixture((0..12).filter(|&h| h != 7)), 6, &NO_RETRY);
        assert_eq!(a.filled, 1);
        assert_eq!(a.samples[7].met, a.samples[6].met);
    }

    #[test]
    fn leading_unservable_hours_dropped() {
        let a = attach_weather(&samples(12), &meta(), &fixture(3..12), 6, &NO_RETRY);
        assert_eq!(a.dropped, 3);
        assert_eq!(a.samples[0].timestamp, t(3));
    }

    #[test]
    fn fill_cap_bounds_staleness() {
        let a = attach_weather(&samples(12), &meta(), &fixture(0..1), 6, &NO_RETRY);
        assert_eq!(a.samples.len(), 7);
        assert_eq!(a.dropped, 5);
    }

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
    }

    impl WeatherProvider for Flaky {
        fn lookup(&self, _: f64, _: f64, hour: DateTime<Utc>) -> Result<Option<MetRecord>> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail_first {
                Err(Error::Provider("timeout".into()))
            } else {
                Ok(Some(met(hour.timestamp() as f64)))
            }
        }
    }

    #[test]
    fn retries_then_reports() {
        let p = Flaky {
            calls: AtomicUsize::new(0),
            fail_first: 2,
        };
        let retry = RetryPolicy {
            attempts: 3,
            backoff_ms: 0,
        };
        let a = attach_weather(&samples(2), &meta(), &p, 6, &retry);
        assert!(a.errors.is_empty());
        assert_eq!(a.samples.len(), 2);

        let p = Flaky {
            calls: AtomicUsize::new(0),
            fail_first: 100,
        };
        let a = attach_weather(&samples(2), &meta(), &p, 6, &retry);
        assert_eq!(a.errors.len(), 2);
        assert_eq!(a.samples.len(), 0);
    }

    #[test]
    fn cache_hits_inner_once() {
        struct Counting(AtomicUsize);
        impl WeatherProvider for Counting {
            fn lookup(&self, _: f64, _: f64, _: DateTime<Utc>) -> Result<Option<MetRecord>> {
                self.0.fetch_add(1, Ordering::SeqCst);
                Ok(Some(met(1.0)))
            }
        }
        let c = CachedProvider::new(Counting(AtomicUsize::new(0)));
        for _ in 0..3 {
            // same key after two-decimal rounding
            c.lookup(23.5211, 87.3119, t(1)).unwrap();
        }
        assert_eq!(c.inner.0.load(Ordering::SeqCst), 1);
        assert_eq!(c.cached_entries(), 1);
    }

    #[test]
    fn fixture_csv_roundtrip() {
        let f = fixture(0..3);
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        let g = FixtureWeather::from_reader(buf.as_slice()).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.lookup(23.52, 87.31, t(2)).unwrap(), Some(met(1002.0)));
        assert_eq!(g.lookup(23.52, 87.31, t(5)).unwrap(), None);
    }
}
