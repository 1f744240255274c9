//! Real-time annotation: per-location sessions accumulate hourly rows and a
//! shared model snapshot turns the latest window into an AQI class.

pub mod http;

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::domain::{check_coordinates, AqiClass, MetRecord, Sample, N_CLASSES};
use crate::error::{Error, Result};
use crate::features::encode_row;
use crate::io::sha256_hex;
use crate::model::ModelArtifact;
use crate::rf::argmax;
use crate::spatial::{profile_from_raster, ColorLegend, Raster, SpatialProfile};
use crate::weather::{floor_hour, lookup_with_retry, CachedProvider, RetryPolicy, WeatherProvider};

/// An immutable loaded model shared by in-flight requests.
pub struct ModelSnapshot {
    pub artifact: ModelArtifact,
    pub version: String,
}

impl ModelSnapshot {
    pub fn new(artifact: ModelArtifact) -> Result<Self> {
        let version = artifact.version()?;
        Ok(ModelSnapshot { artifact, version })
    }

    pub fn window(&self) -> usize {
        self.artifact.manifest.window
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Hours an unservable weather hour may reuse an earlier record.
    pub fill_cap: u32,
    pub retry: RetryPolicy,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            fill_cap: 6,
            retry: RetryPolicy::default(),
        }
    }
}

pub struct LocationSession {
    pub location_id: String,
    pub lat: f64,
    pub lon: f64,
    pub profile: SpatialProfile,
    pub created_at: DateTime<Utc>,
    /// Up to `T - 1` previous hourly rows, oldest first.
    buffer: VecDeque<Sample>,
}

impl LocationSession {
    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateRequest {
    pub location_id: String,
    pub timestamp: DateTime<Utc>,
    pub temperature_c: f64,
    pub humidity_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryState {
    Complete,
    Padded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub location_id: String,
    pub timestamp: DateTime<Utc>,
    pub aqi_class: AqiClass,
    pub probabilities: [f64; N_CLASSES],
    pub model_version: String,
    pub history_state: HistoryState,
    /// Hours of real history used (the rest of the window is padding).
    pub history_hours: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attention: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_version: String,
    pub kind: String,
    pub window: usize,
    pub n_features: usize,
    pub city_tag: String,
    pub utc_offset_minutes: i32,
    pub manifest_hash: String,
    pub scaler_hash: String,
    pub seed: u64,
    pub train_devices: Vec<String>,
}

pub struct AnnotationService {
    model: RwLock<Arc<ModelSnapshot>>,
    provider: CachedProvider<Arc<dyn WeatherProvider>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<LocationSession>>>>,
    config: ServiceConfig,
}

fn location_id(lat: f64, lon: f64, profile: &SpatialProfile) -> String {
    let key = format!(
        "{lat:.6},{lon:.6},{}",
        serde_json::to_string(profile).expect("profile serializes")
    );
    format!("loc-{}", &sha256_hex(key.as_bytes())[..16])
}

impl AnnotationService {
    pub fn new(artifact: ModelArtifact, provider: Arc<dyn WeatherProvider>, config: ServiceConfig) -> Result<Self> {
        Ok(AnnotationService {
            model: RwLock::new(Arc::new(ModelSnapshot::new(artifact)?)),
            provider: CachedProvider::new(provider),
            sessions: RwLock::new(HashMap::new()),
            config,
        })
    }

    pub fn snapshot(&self) -> Arc<ModelSnapshot> {
        Arc::clone(&self.model.read())
    }

    /// Replaces the model; requests already holding the old snapshot finish
    /// on it.
    pub fn swap_model(&self, artifact: ModelArtifact) -> Result<String> {
        let snap = Arc::new(ModelSnapshot::new(artifact)?);
        let v = snap.version.clone();
        *self.model.write() = snap;
        Ok(v)
    }

    pub fn model_info(&self) -> ModelInfo {
        let s = self.snapshot();
        let a = &s.artifact;
        ModelInfo {
            model_version: s.version.clone(),
            kind: a.kind.to_string(),
            window: a.manifest.window,
            n_features: a.manifest.dim(),
            city_tag: a.manifest.city_tag.clone(),
            utc_offset_minutes: a.manifest.utc_offset_minutes,
            manifest_hash: a.manifest_hash.clone(),
            scaler_hash: a.manifest.scaler_hash(),
            seed: a.seed,
            train_devices: a.train_devices.clone(),
        }
    }

    pub fn n_locations(&self) -> usize {
        self.sessions.read().len()
    }

    /// Registers a location from a land-use tile; the id is a hash of the
    /// inputs, so registering the same inputs again returns the same id and
    /// keeps the existing session.
    pub fn register_location(&self, lat: f64, lon: f64, tile: &Raster, legend: &ColorLegend) -> Result<String> {
        let profile = profile_from_raster(tile, legend)?;
        self.register_profile(lat, lon, profile)
    }

    pub fn register_profile(&self, lat: f64, lon: f64, profile: SpatialProfile) -> Result<String> {
        check_coordinates(lat, lon)?;
        let id = location_id(lat, lon, &profile);
        let mut sessions = self.sessions.write();
        sessions.entry(id.clone()).or_insert_with(|| {
            Arc::new(Mutex::new(LocationSession {
                location_id: id.clone(),
                lat,
                lon,
                profile,
                created_at: Utc::now(),
                buffer: VecDeque::new(),
            }))
        });
        Ok(id)
    }

    pub fn profile(&self, location_id: &str) -> Option<SpatialProfile> {
        self.sessions.read().get(location_id).map(|s| s.lock().profile.clone())
    }

    fn weather_at(&self, lat: f64, lon: f64, hour: DateTime<Utc>) -> Result<MetRecord> {
        for back in 0..=i64::from(self.config.fill_cap) {
            let h = hour - Duration::hours(back);
            match lookup_with_retry(&self.provider, lat, lon, h, &self.config.retry) {
                Ok(Some(m)) => return Ok(m),
                Ok(None) => continue,
                Err(e) => {
                    log::warn!("weather lookup failed for {h}: {e}");
                    continue;
                }
            }
        }
        Err(Error::InsufficientContext(format!(
            "no weather within {} hours of {hour}",
            self.config.fill_cap
        )))
    }

    pub fn annotate(&self, req: &AnnotateRequest) -> Result<AnnotationResponse> {
        if !req.temperature_c.is_finite() || !req.humidity_pct.is_finite() {
            return Err(Error::invalid("temperature and humidity must be finite"));
        }
        let session = self
            .sessions
            .read()
            .get(&req.location_id)
            .cloned()
            .ok_or_else(|| Error::UnregisteredLocation(req.location_id.clone()))?;
        let mut s = session.lock();
        let snap = self.snapshot();
        let t = snap.window();
        let hour = floor_hour(req.timestamp);

        if let Some(last) = s.buffer.back() {
            if hour <= last.timestamp {
                return Err(Error::invalid(format!(
                    "timestamp {hour} is not after the previous request at {}",
                    last.timestamp
                )));
            }
            if hour - last.timestamp != Duration::hours(1) {
                s.buffer.clear();
            }
        }

        let met = self.weather_at(s.lat, s.lon, hour)?;
        let current = Sample {
            device_id: s.location_id.clone(),
            timestamp: hour,
            pm25: None,
            temperature: req.temperature_c,
            humidity: req.humidity_pct,
            met: Some(met),
        };

        let manifest = &snap.artifact.manifest;
        let fcfg = manifest.feature_config();
        let history: Vec<&Sample> = s.buffer.iter().skip(s.buffer.len().saturating_sub(t - 1)).collect();
        let history_hours = history.len();
        let mut rows = Vec::with_capacity(t);
        for smp in history.iter().copied().chain(std::iter::once(&current)) {
            rows.push(encode_row(smp, &s.profile, &manifest.scaler, &fcfg)?);
        }
        // pad the front with the earliest real row
        let pad = t - rows.len();
        let steps: Vec<&[f64]> = std::iter::repeat_n(rows[0].as_slice(), pad)
            .chain(rows.iter().map(|r| r.as_slice()))
            .collect();
        let model = &snap.artifact.model;
        let probabilities = model.predict_steps(&steps)?;
        let attention = model.attention(&steps)?;

        s.buffer.push_back(current);
        while s.buffer.len() > t.saturating_sub(1) {
            s.buffer.pop_front();
        }
        Ok(AnnotationResponse {
            location_id: req.location_id.clone(),
            timestamp: hour,
            aqi_class: AqiClass::from_index(argmax(&probabilities))?,
            probabilities,
            model_version: snap.version.clone(),
            history_state: if pad == 0 {
                HistoryState::Complete
            } else {
                HistoryState::Padded
            },
            history_hours,
            attention,
        })
    }
}
