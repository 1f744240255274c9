//! File formats: the dataset CSV, device metadata JSON, raw stream CSV, and
//! small helpers for JSON artifacts and hashing.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{DeviceMeta, MetRecord, Sample};
use crate::error::{Error, Result};
use crate::ingest::{Field, RawEvent, RawStream};
use crate::spatial::SpatialProfile;

pub const DATASET_HEADER: [&str; 14] = [
    "device_id",
    "timestamp_iso8601",
    "pm25",
    "temperature",
    "humidity",
    "feels_like",
    "temp_min",
    "temp_max",
    "pressure",
    "wind_speed",
    "wind_direction",
    "precipitation",
    "cloud_cover",
    "weather_type",
];

pub fn parse_ts(s: &str) -> Result<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    // naive timestamps are taken as UTC
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    Err(Error::Parse(format!("bad timestamp {s:?}")))
}

pub fn format_ts(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn opt_f64(cell: &str, what: &str, line: usize) -> Result<Option<f64>> {
    let c = cell.trim();
    if c.is_empty() {
        return Ok(None);
    }
    c.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Parse(format!("line {line}: bad {what} value {c:?}")))
}

pub fn read_samples(r: impl Read) -> Result<Vec<Sample>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).ne(DATASET_HEADER) {
        return Err(Error::Parse(format!(
            "unexpected dataset header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |idx: usize| opt_f64(&rec[idx], DATASET_HEADER[idx], line);
        let req = |idx: usize| {
            num(idx)?.ok_or_else(|| Error::Parse(format!("line {line}: missing {}", DATASET_HEADER[idx])))
        };
        let met_cells: Vec<Option<f64>> = (5..13).map(num).collect::<Result<_>>()?;
        let wtype = rec[13].trim();
        let met = if met_cells.iter().all(Option::is_none) && wtype.is_empty() {
            None
        } else if met_cells.iter().all(Option::is_some) && !wtype.is_empty() {
            let m: Vec<f64> = met_cells.into_iter().flatten().collect();
            Some(MetRecord {
                feels_like: m[0],
                temp_min: m[1],
                temp_max: m[2],
                pressure: m[3],
                wind_speed: m[4],
                wind_direction: m[5],
                precipitation: m[6],
                cloud_cover: m[7],
                weather_type: wtype.to_string(),
            })
        } else {
            return Err(Error::Parse(format!("line {line}: weather fields partially missing")));
        };
        out.push(Sample {
            device_id: rec[0].trim().to_string(),
            timestamp: parse_ts(&rec[1])?,
            pm25: num(2)?,
            temperature: req(3)?,
            humidity: req(4)?,
            met,
        });
    }
    Ok(out)
}

pub fn write_samples<'a>(w: impl Write, samples: impl IntoIterator<Item = &'a Sample>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(DATASET_HEADER)?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in samples {
        let m = s.met.as_ref();
        wtr.write_record([
            s.device_id.clone(),
            format_ts(s.timestamp),
            f(s.pm25),
            s.temperature.to_string(),
            s.humidity.to_string(),
            f(m.map(|m| m.feels_like)),
            f(m.map(|m| m.temp_min)),
            f(m.map(|m| m.temp_max)),
            f(m.map(|m| m.pressure)),
            f(m.map(|m| m.wind_speed)),
            f(m.map(|m| m.wind_direction)),
            f(m.map(|m| m.precipitation)),
            f(m.map(|m| m.cloud_cover)),
            m.map(|m| m.weather_type.clone()).unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<dataset>", e))?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(std::io::BufReader::new(f))
}

pub fn save_samples<'a>(path: &Path, samples: impl IntoIterator<Item = &'a Sample>) -> Result<()> {
    let mut buf = Vec::new();
    write_samples(&mut buf, samples)?;
    write_bytes(path, &buf)
}

/// One entry of the device metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetaEntry {
    pub device_id: String,
    pub lat: f64,
    pub lon: f64,
    pub city_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_profile_path: Option<PathBuf>,
}

/// Loads device metadata; profile paths resolve relative to the file.
pub fn load_device_meta(path: &Path) -> Result<Vec<DeviceMeta>> {
    let entries: Vec<DeviceMetaEntry> = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let spatial_profile = match &e.spatial_profile_path {
                Some(p) => Some(read_json::<SpatialProfile>(&base.join(p))?),
                None => None,
            };
            let meta = DeviceMeta {
                device_id: e.device_id,
                latitude: e.lat,
                longitude: e.lon,
                city_tag: e.city_tag,
                spatial_profile,
            };
            meta.validate()?;
            Ok(meta)
        })
        .collect()
}

pub fn read_raw_streams(r: impl Read) -> Result<Vec<RawStream>> {
    #[derive(Deserialize)]
    struct Row {
        device_id: String,
        timestamp: String,
        field: String,
        value: f64,
    }
    let mut by_device: BTreeMap<String, Vec<RawEvent>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_reader(r);
    for row in rdr.deserialize() {
        let row: Row = row?;
        let field = Field::parse(row.field.trim())
            .ok_or_else(|| Error::Parse(format!("unknown raw field {:?}", row.field)))?;
        by_device.entry(row.device_id).or_default().push(RawEvent {
            timestamp: parse_ts(&row.timestamp)?,
            field,
            value: row.value,
        });
    }
    Ok(by_device.into_iter().map(|(id, ev)| RawStream::new(id, ev)).collect())
}

/// Reads every `*.csv` file of a directory (`device_id,timestamp,field,value`)
/// and merges events per device.
pub fn load_raw_dir(dir: &Path) -> Result<Vec<RawStream>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut merged: BTreeMap<String, Vec<RawEvent>> = BTreeMap::new();
    for f in files {
        let file = fs::File::open(&f).map_err(|e| Error::io(&f, e))?;
        for s in read_raw_streams(std::io::BufReader::new(file))? {
            merged
                .entry(s.device_id().to_string())
                .or_default()
                .extend(s.events().iter().cloned());
        }
    }
    Ok(merged.into_iter().map(|(id, ev)| RawStream::new(id, ev)).collect())
}

pub fn write_raw_stream(w: impl Write, stream: &RawStream) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["device_id", "timestamp", "field", "value"])?;
    for e in stream.events() {
        wtr.write_record([
            stream.device_id().to_string(),
            e.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
            e.field.name().to_string(),
            e.value.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<raw stream>", e))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn timestamps() {
        let t = Utc.with_ymd_and_hms(2021, 4, 2, 13, 0, 0).unwrap();
        assert_eq!(format_ts(t), "2021-04-02T13:00:00Z");
        assert_eq!(parse_ts("2021-04-02T13:00:00Z").unwrap(), t);
        assert_eq!(parse_ts("2021-04-02T18:30:00+05:30").unwrap(), t);
        assert_eq!(parse_ts("2021-04-02 13:00:00").unwrap(), t);
        assert!(parse_ts("yesterday").is_err());
    }

    #[test]
    fn dataset_csv_roundtrip_with_missing_cells() {
        let csv = "device_id,timestamp_iso8601,pm25,temperature,humidity,feels_like,temp_min,temp_max,pressure,wind_speed,wind_direction,precipitation,cloud_cover,weather_type\n\
                   a,2021-01-01T00:00:00Z,,21.5,60,,,,,,,,,\n\
                   a,2021-01-01T01:00:00Z,45.25,21,61,20,19,22,1012,1.5,270,0,40,haze\n";
        let s = read_samples(csv.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].pm25, None);
        assert!(s[0].met.is_none());
        assert_eq!(s[1].met.as_ref().unwrap().weather_type, "haze");
        let mut buf = Vec::new();
        write_samples(&mut buf, &s).unwrap();
        assert_eq!(read_samples(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn partial_weather_rejected() {
        let csv = "device_id,timestamp_iso8601,pm25,temperature,humidity,feels_like,temp_min,temp_max,pressure,wind_speed,wind_direction,precipitation,cloud_cover,weather_type\n\
                   a,2021-01-01T00:00:00Z,1,21.5,60,20,,,,,,,,\n";
        assert!(read_samples(csv.as_bytes()).is_err());
    }

    #[test]
    fn raw_stream_csv() {
        let csv = "device_id,timestamp,field,value\nb,2021-01-01T00:10:00Z,pm25,3\na,2021-01-01T00:20:00Z,humidity,50\n";
        let s = read_raw_streams(csv.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].device_id(), "a");
        let mut buf = Vec::new();
        write_raw_stream(&mut buf, &s[1]).unwrap();
        assert_eq!(read_raw_streams(buf.as_slice()).unwrap()[0], s[1]);
    }
}
