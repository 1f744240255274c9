//! C ABI over `aqi-core`.
//!
//! Every fallible call returns an [`AqiStatus`]; on failure the message is
//! available from [`aqi_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.
//! Strings handed out by the library are freed with [`aqi_string_free`].
//! Pointer arguments must be valid for the documented length; null is
//! reported as `AQI_STATUS_NULL_POINTER` where the call can detect it.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use aqi_core::domain::N_CLASSES;
use aqi_core::model::ModelArtifact;
use aqi_core::rf::argmax;
use aqi_core::service::{AnnotateRequest, AnnotationService, HistoryState, ServiceConfig};
use aqi_core::spatial::{haversine_km, profile_from_raster, ColorLegend, LatLon, Raster, SpatialProfile};
use aqi_core::weather::FixtureWeather;
use aqi_core::{bin_aqi, Binned, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AqiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    UnregisteredLocation = 3,
    InsufficientContext = 4,
    Io = 5,
    Parse = 6,
    NonFinite = 7,
    Internal = 8,
}

/// Result of one annotation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AqiAnnotation {
    /// 1 (good) to 5 (severe).
    pub aqi_class: u8,
    pub probabilities: [f64; 5],
    /// Real hours of history behind the prediction.
    pub history_hours: u32,
    /// 1 when part of the window was padded.
    pub padded: u8,
}

pub struct AqiModel {
    artifact: ModelArtifact,
}

pub struct AqiService {
    inner: AnnotationService,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AqiStatus {
    match e {
        Error::UnregisteredLocation(_) => AqiStatus::UnregisteredLocation,
        Error::InsufficientContext(_) => AqiStatus::InsufficientContext,
        Error::NonFinite { .. } => AqiStatus::NonFinite,
        Error::Io { .. } => AqiStatus::Io,
        Error::Json(_) | Error::Csv(_) | Error::Parse(_) => AqiStatus::Parse,
        Error::Stage { source, .. } => status_of(source),
        _ => AqiStatus::InvalidInput,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (AqiStatus, String)>) -> AqiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AqiStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AqiStatus::Internal
        }
    }
}

fn core_err(e: Error) -> (AqiStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AqiStatus, String) {
    (AqiStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AqiStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AqiStatus::InvalidInput, format!("{what} is not UTF-8")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn aqi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn aqi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Bins a PM2.5 reading; writes 0 when the reading is above the last band.
#[no_mangle]
pub unsafe extern "C" fn aqi_bin_pm25(pm25: f64, out_class: *mut u8) -> AqiStatus {
    guard(|| {
        if out_class.is_null() {
            return Err(null("out_class"));
        }
        let v = match bin_aqi(pm25).map_err(core_err)? {
            Binned::Class(c) => c.value(),
            Binned::Excluded => 0,
        };
        *out_class = v;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn aqi_haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64, out_km: *mut f64) -> AqiStatus {
    guard(|| {
        if out_km.is_null() {
            return Err(null("out_km"));
        }
        *out_km = haversine_km(LatLon::new(lat1, lon1), LatLon::new(lat2, lon2)).map_err(core_err)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn aqi_model_load(path: *const c_char, out: *mut *mut AqiModel) -> AqiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let artifact = ModelArtifact::load(Path::new(path)).map_err(core_err)?;
        *out = Box::into_raw(Box::new(AqiModel { artifact }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn aqi_model_free(model: *mut AqiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window length `T` and per-step feature count the model expects.
#[no_mangle]
pub unsafe extern "C" fn aqi_model_shape(model: *const AqiModel, out_window: *mut usize, out_features: *mut usize) -> AqiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_window.is_null() || out_features.is_null() {
            return Err(null("output"));
        }
        *out_window = m.artifact.manifest.window;
        *out_features = m.artifact.manifest.dim();
        Ok(())
    })
}

/// Predicts from an encoded window: `features` holds `n_steps * n_features`
/// values, oldest step first. `out_probs` receives 5 probabilities.
#[no_mangle]
pub unsafe extern "C" fn aqi_model_predict(
    model: *const AqiModel,
    features: *const f64,
    n_steps: usize,
    n_features: usize,
    out_probs: *mut f64,
    out_class: *mut u8,
) -> AqiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        if out_probs.is_null() || out_class.is_null() {
            return Err(null("output"));
        }
        let dim = m.artifact.manifest.dim();
        let window = m.artifact.manifest.window;
        if n_features != dim || n_steps != window {
            return Err((
                AqiStatus::InvalidInput,
                format!("expected {window} steps of {dim} features, got {n_steps} x {n_features}"),
            ));
        }
        let flat = std::slice::from_raw_parts(features, n_steps * n_features);
        let steps: Vec<&[f64]> = flat.chunks(n_features).collect();
        let probs = m.artifact.model.predict_steps(&steps).map_err(core_err)?;
        std::slice::from_raw_parts_mut(out_probs, N_CLASSES).copy_from_slice(&probs);
        *out_class = (argmax(&probs) + 1) as u8;
        Ok(())
    })
}

/// Creates a service from a model artifact and a weather fixture CSV.
#[no_mangle]
pub unsafe extern "C" fn aqi_service_new(
    model_path: *const c_char,
    weather_path: *const c_char,
    out: *mut *mut AqiService,
) -> AqiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model_path = str_arg(model_path, "model_path")?;
        let weather_path = str_arg(weather_path, "weather_path")?;
        let artifact = ModelArtifact::load(Path::new(model_path)).map_err(core_err)?;
        let weather = FixtureWeather::load(Path::new(weather_path)).map_err(core_err)?;
        let inner =
            AnnotationService::new(artifact, Arc::new(weather), ServiceConfig::default()).map_err(core_err)?;
        *out = Box::into_raw(Box::new(AqiService { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn aqi_service_free(service: *mut AqiService) {
    if !service.is_null() {
        drop(Box::from_raw(service));
    }
}

/// Registers a location from 11 land-use fractions in category order.
/// The location id is returned as a string to free with `aqi_string_free`.
#[no_mangle]
pub unsafe extern "C" fn aqi_service_register_profile(
    service: *const AqiService,
    lat: f64,
    lon: f64,
    fractions: *const f64,
    n_fractions: usize,
    out_location_id: *mut *mut c_char,
) -> AqiStatus {
    guard(|| {
        let s = service.as_ref().ok_or_else(|| null("service"))?;
        if fractions.is_null() {
            return Err(null("fractions"));
        }
        if out_location_id.is_null() {
            return Err(null("out_location_id"));
        }
        let mut f = [0.0; 11];
        if n_fractions != f.len() {
            return Err((
                AqiStatus::InvalidInput,
                format!("expected {} fractions, got {n_fractions}", f.len()),
            ));
        }
        f.copy_from_slice(std::slice::from_raw_parts(fractions, n_fractions));
        let profile = SpatialProfile::new(f).map_err(core_err)?;
        let id = s.inner.register_profile(lat, lon, profile).map_err(core_err)?;
        *out_location_id = into_c_string(id);
        Ok(())
    })
}

/// Registers a location from a binary PPM tile and a legend in JSON.
#[no_mangle]
pub unsafe extern "C" fn aqi_service_register_tile(
    service: *const AqiService,
    lat: f64,
    lon: f64,
    ppm: *const u8,
    ppm_len: usize,
    legend_json: *const c_char,
    out_location_id: *mut *mut c_char,
) -> AqiStatus {
    guard(|| {
        let s = service.as_ref().ok_or_else(|| null("service"))?;
        if ppm.is_null() {
            return Err(null("ppm"));
        }
        if out_location_id.is_null() {
            return Err(null("out_location_id"));
        }
        let legend = ColorLegend::from_json(str_arg(legend_json, "legend_json")?).map_err(core_err)?;
        let tile = Raster::decode_ppm(std::slice::from_raw_parts(ppm, ppm_len)).map_err(core_err)?;
        let profile = profile_from_raster(&tile, &legend).map_err(core_err)?;
        let id = s.inner.register_profile(lat, lon, profile).map_err(core_err)?;
        *out_location_id = into_c_string(id);
        Ok(())
    })
}

/// Annotates one hourly reading; `unix_seconds` is UTC.
#[no_mangle]
pub unsafe extern "C" fn aqi_service_annotate(
    service: *const AqiService,
    location_id: *const c_char,
    unix_seconds: i64,
    temperature_c: f64,
    humidity_pct: f64,
    out: *mut AqiAnnotation,
) -> AqiStatus {
    guard(|| {
        let s = service.as_ref().ok_or_else(|| null("service"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let timestamp = chrono::DateTime::from_timestamp(unix_seconds, 0)
            .ok_or_else(|| (AqiStatus::InvalidInput, format!("timestamp {unix_seconds} out of range")))?;
        let req = AnnotateRequest {
            location_id: str_arg(location_id, "location_id")?.to_string(),
            timestamp,
            temperature_c,
            humidity_pct,
        };
        let r = s.inner.annotate(&req).map_err(core_err)?;
        *out = AqiAnnotation {
            aqi_class: r.aqi_class.value(),
            probabilities: r.probabilities,
            history_hours: r.history_hours as u32,
            padded: u8::from(r.history_state == HistoryState::Padded),
        };
        Ok(())
    })
}

/// Same as `aqi_service_annotate` with the request and response as JSON,
/// in the shape used by the HTTP endpoint.
#[no_mangle]
pub unsafe extern "C" fn aqi_service_annotate_json(
    service: *const AqiService,
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> AqiStatus {
    guard(|| {
        let s = service.as_ref().ok_or_else(|| null("service"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let req: AnnotateRequest = serde_json::from_str(str_arg(request_json, "request_json")?)
            .map_err(|e| core_err(Error::Json(e)))?;
        let r = s.inner.annotate(&req).map_err(core_err)?;
        *out_json = into_c_string(serde_json::to_string(&r).map_err(|e| core_err(Error::Json(e)))?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn aqi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
