//! Seeded synthetic corpus: devices with land-use tiles, hourly weather, and
//! PM2.5 driven by season, time of day, weekday, weather and location.

use std::f64::consts::TAU;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, Months, TimeZone, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{bin_aqi, Dataset, DeviceMeta, MetRecord, Sample, N_CLASSES};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::ingest::{Field, RawEvent, RawStream};
use crate::io::{write_bytes, write_json, write_raw_stream, DeviceMetaEntry};
use crate::spatial::{profile_from_raster, Category, ColorLegend, Raster, Rgb, SpatialProfile};
use crate::weather::FixtureWeather;

pub const TILE_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_devices: usize,
    pub months: u32,
    pub start: DateTime<Utc>,
    pub city_tag: String,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Per-hour chance that a device misses a reading.
    pub dropout_rate: f64,
    /// Multi-hour outages per device per month.
    pub outages_per_month: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_devices: 4,
            months: 6,
            start: Utc.with_ymd_and_hms(2021, 9, 1, 0, 0, 0).unwrap(),
            city_tag: "durgapur".into(),
            center_lat: 23.52,
            center_lon: 87.31,
            dropout_rate: 0.01,
            outages_per_month: 0.5,
        }
    }
}

pub struct SynthDevice {
    pub meta: DeviceMeta,
    pub tile: Raster,
    /// Multiplicative PM2.5 factor derived from the land-use profile.
    pub pm_factor: f64,
}

pub struct SynthCorpus {
    pub config: SynthConfig,
    pub devices: Vec<SynthDevice>,
    /// Hourly truth rows with weather attached.
    pub dataset: Dataset,
    pub raw: Vec<RawStream>,
    pub weather: FixtureWeather,
    pub legend: ColorLegend,
    /// Generation attempts needed before every class appeared.
    pub attempts: u32,
}

fn monthly(month: u32, table: [f64; 12]) -> f64 {
    table[(month - 1) as usize]
}

// Mean temperature (°C), humidity (%), PM2.5 level (µg/m³) per month.
const TEMP: [f64; 12] = [17.0, 21.0, 27.0, 32.0, 34.0, 32.0, 30.0, 30.0, 30.0, 28.0, 23.0, 18.0];
const HUMID: [f64; 12] = [62.0, 55.0, 45.0, 50.0, 58.0, 75.0, 85.0, 86.0, 84.0, 75.0, 65.0, 63.0];
const PM_LEVEL: [f64; 12] = [150.0, 115.0, 80.0, 60.0, 50.0, 38.0, 30.0, 30.0, 36.0, 62.0, 110.0, 145.0];
const RAIN_P: [f64; 12] = [0.01, 0.02, 0.02, 0.03, 0.05, 0.12, 0.18, 0.18, 0.14, 0.06, 0.02, 0.01];

fn random_profile(rng: &mut ChaCha8Rng) -> [f64; Category::COUNT] {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    let mut w = [0.0; Category::COUNT];
    for x in &mut w {
        *x = f64::exp(n.sample(rng));
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

/// Tile with category pixel counts proportional to `fractions`, some
/// background pixels, laid out in horizontal bands.
fn render_tile(fractions: &[f64; Category::COUNT], legend: &ColorLegend, rng: &mut ChaCha8Rng) -> Raster {
    let total = TILE_SIZE * TILE_SIZE;
    let background: Rgb = legend.background_colors().next().expect("standard legend has background");
    let n_bg = rng.random_range(total / 20..total / 8);
    let matched = total - n_bg;
    let mut counts: Vec<usize> = fractions.iter().map(|f| (f * matched as f64).floor() as usize).collect();
    let short = matched - counts.iter().sum::<usize>();
    counts[0] += short;
    let mut pixels = Vec::with_capacity(total);
    for (c, &k) in Category::ALL.iter().zip(&counts) {
        let color = legend.color_of(*c).expect("standard legend covers every category");
        pixels.extend(std::iter::repeat_n(color, k));
    }
    pixels.extend(std::iter::repeat_n(background, n_bg));
    Raster::new(TILE_SIZE, TILE_SIZE, pixels).expect("pixel count matches tile size")
}

fn pm_factor(p: &SpatialProfile) -> f64 {
    use Category::*;
    let roads = p.get(Oneway) + p.get(Twoway) + p.get(Highway);
    let green = p.get(Park) + p.get(Water) + p.get(NaturalLand);
    f64::exp(0.5 * (roads - 3.0 / 11.0) - 0.4 * (green - 3.0 / 11.0))
}

fn make_devices(cfg: &SynthConfig, legend: &ColorLegend, rng: &mut ChaCha8Rng) -> Result<Vec<SynthDevice>> {
    (0..cfg.n_devices)
        .map(|i| {
            let lat = cfg.center_lat + rng.random_range(-0.08..0.08);
            let lon = cfg.center_lon + rng.random_range(-0.08..0.08);
            let tile = render_tile(&random_profile(rng), legend, rng);
            let profile = profile_from_raster(&tile, legend)?;
            Ok(SynthDevice {
                pm_factor: pm_factor(&profile),
                meta: DeviceMeta {
                    device_id: format!("dev{:02}", i + 1),
                    latitude: (lat * 1e4).round() / 1e4,
                    longitude: (lon * 1e4).round() / 1e4,
                    city_tag: cfg.city_tag.clone(),
                    spatial_profile: Some(profile),
                },
                tile,
            })
        })
        .collect()
}

fn diurnal(local_hour: f64) -> f64 {
    let bump = |center: f64, width: f64| {
        let d = (local_hour - center + 12.0).rem_euclid(24.0) - 12.0;
        f64::exp(-d * d / (2.0 * width * width))
    };
    1.0 + 0.55 * bump(8.5, 1.5) + 0.65 * bump(20.0, 2.0) - 0.3 * bump(15.0, 2.5) - 0.15 * bump(3.5, 2.0)
}

fn weekday_factor(weekday: u32) -> f64 {
    match weekday {
        5 => 0.9,
        6 => 0.78,
        _ => 1.0,
    }
}

struct CityWeather {
    temp_noise: f64,
    humid_noise: f64,
    pressure_noise: f64,
    wind: f64,
}

/// One city-wide hourly weather state; devices see it with small offsets.
fn city_met(
    local: DateTime<chrono::FixedOffset>,
    state: &mut CityWeather,
    rng: &mut ChaCha8Rng,
) -> (f64, f64, MetRecord) {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    let month = local.month();
    let h = local.hour() as f64;
    let season_t = monthly(month, TEMP);
    state.temp_noise = 0.95 * state.temp_noise + 0.45 * n.sample(rng);
    state.humid_noise = 0.95 * state.humid_noise + 1.6 * n.sample(rng);
    state.pressure_noise = 0.97 * state.pressure_noise + 0.3 * n.sample(rng);
    state.wind = (0.9 * state.wind + 0.1 * (2.0 + 1.2 * (TAU * (h - 14.0) / 24.0).cos()) + 0.25 * n.sample(rng)).max(0.0);

    let daily = (TAU * (h - 14.0) / 24.0).cos();
    let temperature = season_t + 5.0 * daily + state.temp_noise;
    let rain = rng.random::<f64>() < monthly(month, RAIN_P);
    let precipitation = if rain { -2.0 * (1.0 - rng.random::<f64>()).ln() } else { 0.0 };
    let humidity = (monthly(month, HUMID) - 14.0 * daily + state.humid_noise + if rain { 10.0 } else { 0.0 }).clamp(8.0, 100.0);
    let winter = matches!(month, 11 | 12 | 1 | 2);
    let pressure = 1006.0 + if winter { 8.0 } else { 0.0 } + state.pressure_noise;
    let base_dir = if winter { 315.0 } else if (6..=9).contains(&month) { 135.0 } else { 225.0 };
    let wind_direction = (base_dir + 40.0 * n.sample(rng)).rem_euclid(360.0);
    let cloud_cover: f64 = if rain {
        rng.random_range(70.0..100.0)
    } else {
        (monthly(month, RAIN_P) * 350.0 + 20.0 * n.sample(rng)).clamp(0.0, 100.0)
    };
    let weather_type = if precipitation > 6.0 {
        "thunderstorm"
    } else if rain {
        "rain"
    } else if winter && humidity > 75.0 && h < 9.0 {
        "mist"
    } else if winter && rng.random::<f64>() < 0.35 {
        "haze"
    } else if cloud_cover > 85.0 {
        "overcast"
    } else if cloud_cover > 40.0 {
        "clouds"
    } else {
        "clear"
    };
    let met = MetRecord {
        feels_like: temperature + 0.06 * (humidity - 50.0),
        temp_min: temperature - 1.0 - 0.3 * rng.random::<f64>(),
        temp_max: temperature + 1.0 + 0.3 * rng.random::<f64>(),
        pressure,
        wind_speed: state.wind,
        wind_direction,
        precipitation,
        cloud_cover,
        weather_type: weather_type.into(),
    };
    (temperature, humidity, met)
}

fn round_to(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (x * s).round() / s
}

fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    let legend = ColorLegend::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let devices = make_devices(cfg, &legend, &mut rng)?;
    let end = cfg
        .start
        .checked_add_months(Months::new(cfg.months))
        .ok_or_else(|| Error::invalid("synthetic period overflows"))?;
    let hours = (end - cfg.start).num_hours();
    let fcfg = FeatureConfig::default();
    let n = Normal::new(0.0, 1.0).expect("valid normal");

    // city-wide weather first so every device sees the same sky
    let mut state = CityWeather {
        temp_noise: 0.0,
        humid_noise: 0.0,
        pressure_noise: 0.0,
        wind: 2.0,
    };
    let city: Vec<(f64, f64, MetRecord)> = (0..hours)
        .map(|k| city_met(fcfg.local(cfg.start + Duration::hours(k)), &mut state, &mut rng))
        .collect();

    let mut samples = Vec::new();
    let mut raw = Vec::new();
    let mut weather = FixtureWeather::new();
    for (di, dev) in devices.iter().enumerate() {
        let mut drng = ChaCha8Rng::seed_from_u64(seed);
        drng.set_stream(1 + di as u64);
        let n_outages = (cfg.outages_per_month * cfg.months as f64).round() as usize;
        let outages: Vec<(i64, i64)> = (0..n_outages)
            .map(|_| {
                let s = drng.random_range(0..hours.max(1));
                (s, s + drng.random_range(8..30))
            })
            .collect();
        let t_off = drng.random_range(-0.8..0.8);
        let h_off = drng.random_range(-3.0..3.0);
        let mut ar = 0.0;
        let mut events = Vec::new();
        for (k, (temp, hum, met)) in city.iter().enumerate() {
            let ts = cfg.start + Duration::hours(k as i64);
            let local = fcfg.local(ts);
            let temperature = round_to(temp + t_off + 0.3 * n.sample(&mut drng), 2);
            let humidity = round_to((hum + h_off + 1.0 * n.sample(&mut drng)).clamp(5.0, 100.0), 2);
            let met = MetRecord {
                feels_like: round_to(met.feels_like + t_off, 2),
                temp_min: round_to(met.temp_min + t_off, 2),
                temp_max: round_to(met.temp_max + t_off, 2),
                pressure: round_to(met.pressure, 2),
                wind_speed: round_to(met.wind_speed, 2),
                wind_direction: round_to(met.wind_direction, 1).rem_euclid(360.0),
                precipitation: round_to(met.precipitation, 2),
                cloud_cover: round_to(met.cloud_cover, 1),
                weather_type: met.weather_type.clone(),
            };
            weather.insert(dev.meta.latitude, dev.meta.longitude, ts, met.clone());

            ar = 0.85 * ar + 0.11 * n.sample(&mut drng);
            let month = local.month();
            let coupling = f64::exp(-0.035 * (temperature - monthly(month, TEMP)))
                * (1.0 + 0.006 * (humidity - monthly(month, HUMID)))
                * f64::exp(-0.12 * met.wind_speed)
                * if met.precipitation > 0.0 { 0.7 } else { 1.0 };
            let pm = monthly(month, PM_LEVEL)
                * diurnal(local.hour() as f64)
                * weekday_factor(local.weekday().num_days_from_monday())
                * coupling
                * dev.pm_factor
                * f64::exp(ar);
            let pm25 = round_to(pm, 1);

            let k = k as i64;
            if outages.iter().any(|&(s, e)| (s..e).contains(&k)) || drng.random::<f64>() < cfg.dropout_rate {
                continue;
            }
            samples.push(Sample {
                device_id: dev.meta.device_id.clone(),
                timestamp: ts,
                pm25: Some(pm25),
                temperature,
                humidity,
                met: Some(met),
            });
            // asynchronous polls inside (ts - 1h, ts]; the last one carries
            // the hourly value
            for (field, value) in [
                (Field::Pm25, pm25),
                (Field::Temperature, temperature),
                (Field::Humidity, humidity),
            ] {
                let early = drng.random_range(1..3600);
                events.push(RawEvent {
                    timestamp: ts - Duration::seconds(early),
                    field,
                    value: round_to(value * (1.0 + 0.05 * n.sample(&mut drng)), 2),
                });
                let last = drng.random_range(0..600);
                events.push(RawEvent {
                    timestamp: ts - Duration::seconds(last.min(early - 1)),
                    field,
                    value,
                });
            }
        }
        raw.push(RawStream::new(dev.meta.device_id.clone(), events));
    }
    let mut dataset = Dataset::new(devices.iter().map(|d| d.meta.clone()).collect(), samples);
    dataset.drop_excluded();
    Ok(SynthCorpus {
        config: cfg.clone(),
        devices,
        dataset,
        raw,
        weather,
        legend,
        attempts: 1,
    })
}

/// Class counts over labeled rows.
pub fn class_counts(ds: &Dataset) -> [usize; N_CLASSES] {
    let mut c = [0; N_CLASSES];
    for (_, rows) in ds.series() {
        for s in rows {
            if let Some(l) = s.label() {
                c[l.index()] += 1;
            }
        }
    }
    c
}

/// Generates a corpus, retrying with derived seeds until all five classes
/// appear.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_devices < 2 {
        return Err(Error::invalid("synthetic corpus needs at least 2 devices"));
    }
    if cfg.months == 0 {
        return Err(Error::invalid("synthetic corpus needs at least 1 month"));
    }
    const MAX_ATTEMPTS: u32 = 16;
    for attempt in 0..MAX_ATTEMPTS {
        let seed = cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(attempt as u64));
        let mut corpus = generate(cfg, seed)?;
        if class_counts(&corpus.dataset).iter().all(|&c| c > 0) {
            corpus.attempts = attempt + 1;
            return Ok(corpus);
        }
        log::info!("synthetic attempt {attempt} missed a class, regenerating");
    }
    Err(Error::Validation(format!(
        "no class-complete corpus after {MAX_ATTEMPTS} attempts"
    )))
}

/// Mean PM2.5 over rows whose local month is in `months`.
pub fn mean_pm25_in(ds: &Dataset, months: &[u32]) -> Option<f64> {
    let cfg = FeatureConfig::default();
    let vals: Vec<f64> = ds
        .series()
        .flat_map(|(_, rows)| rows.iter())
        .filter(|s| months.contains(&cfg.local(s.timestamp).month()))
        .filter_map(|s| s.pm25)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Sanity check that labeled rows exist for every device.
pub fn labeled_rows(ds: &Dataset, id: &str) -> usize {
    ds.samples(id).iter().filter(|s| s.pm25.and_then(|v| bin_aqi(v).ok()).is_some()).count()
}

/// Files written by [`write_corpus`], relative to the output directory.
pub mod layout {
    pub const DATASET: &str = "dataset.csv";
    pub const DEVICES: &str = "devices.json";
    pub const WEATHER: &str = "weather.csv";
    pub const LEGEND: &str = "legend.json";
    pub const RAW_DIR: &str = "raw";
    pub const TILE_DIR: &str = "tiles";
    pub const PROFILE_DIR: &str = "profiles";
}

/// Writes the corpus: truth dataset, device metadata pointing at profile
/// files under `profiles/`, weather fixture, legend, tiles and raw streams.
/// Profiles themselves are produced from the tiles by the `profile` step.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    let p = dir.join(layout::DATASET);
    crate::io::save_samples(&p, corpus.dataset.series().flat_map(|(_, r)| r.iter()))?;
    written.push(p);

    let entries: Vec<DeviceMetaEntry> = corpus
        .devices
        .iter()
        .map(|d| DeviceMetaEntry {
            device_id: d.meta.device_id.clone(),
            lat: d.meta.latitude,
            lon: d.meta.longitude,
            city_tag: d.meta.city_tag.clone(),
            spatial_profile_path: Some(format!("{}/{}.json", layout::PROFILE_DIR, d.meta.device_id).into()),
        })
        .collect();
    let p = dir.join(layout::DEVICES);
    write_json(&p, &entries)?;
    written.push(p);

    let mut buf = Vec::new();
    corpus.weather.write(&mut buf)?;
    let p = dir.join(layout::WEATHER);
    write_bytes(&p, &buf)?;
    written.push(p);

    let p = dir.join(layout::LEGEND);
    write_json(&p, &corpus.legend)?;
    written.push(p);

    for d in &corpus.devices {
        let p = dir.join(layout::TILE_DIR).join(format!("{}.ppm", d.meta.device_id));
        write_bytes(&p, &d.tile.encode_ppm())?;
        written.push(p);
    }
    for s in &corpus.raw {
        let mut buf = Vec::new();
        write_raw_stream(&mut buf, s)?;
        let p = dir.join(layout::RAW_DIR).join(format!("{}.csv", s.device_id()));
        write_bytes(&p, &buf)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            months: 2,
            n_devices: 2,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = synth_corpus(&small()).unwrap();
        let b = synth_corpus(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.raw, b.raw);
        let c = synth_corpus(&SynthConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn diurnal_peaks_morning_and_evening() {
        let at = |h: f64| diurnal(h);
        assert!(at(8.5) > at(13.0));
        assert!(at(20.0) > at(15.0));
        assert!(at(20.0) > at(3.0));
    }

    #[test]
    fn tiles_reproduce_profiles() {
        let corpus = synth_corpus(&small()).unwrap();
        for d in &corpus.devices {
            let p = profile_from_raster(&d.tile, &corpus.legend).unwrap();
            assert_eq!(Some(&p), d.meta.spatial_profile.as_ref());
        }
    }

    #[test]
    fn rejects_single_device() {
        assert!(synth_corpus(&SynthConfig { n_devices: 1, ..small() }).is_err());
    }
}
