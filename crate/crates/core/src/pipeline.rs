//! End-to-end run: synth or load inputs, profile tiles, ingest raw streams,
//! encode features, train, and evaluate leave-one-out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::domain::{validate_dataset, Dataset, DeviceMeta};
use crate::error::{Error, Result};
use crate::eval::{leave_one_out, EvalSetup};
use crate::features::{encode_device, fit_scaler, write_encoded, DeviceRows, FeatureManifest};
use crate::ingest::{regularize, FillAudit, GridConfig, RawStream};
use crate::io::{read_json, sha256_hex, write_bytes, DeviceMetaEntry};
use crate::model::{train_artifact, ModelKind};
use crate::spatial::{profile_from_raster, ColorLegend, Raster, SpatialProfile};
use crate::synth::{layout, synth_corpus, write_corpus, SynthConfig};
use crate::weather::{attach_weather, FixtureWeather, RetryPolicy, WeatherProvider};

pub const STAGES: [&str; 6] = ["synth", "profile", "ingest", "featurize", "train", "eval"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: String,
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: ModelKind,
    pub mean_weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub run_config: Value,
    pub seed: u64,
    pub input: String,
    pub artifacts: Vec<ArtifactEntry>,
    pub loo: Vec<ModelSummary>,
}

impl PipelineManifest {
    pub fn hashes(&self) -> BTreeMap<&str, &str> {
        self.artifacts
            .iter()
            .map(|a| (a.path.as_str(), a.sha256.as_str()))
            .collect()
    }
}

/// Per-device audit of the ingest stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceIngest {
    pub device_id: String,
    pub grid: FillAudit,
    pub weather_filled: usize,
    pub weather_dropped: usize,
    pub weather_errors: usize,
    pub rows: usize,
    pub warnings: Vec<String>,
}

struct Emitter<'a> {
    out: &'a Path,
    stage: &'static str,
    entries: Vec<ArtifactEntry>,
}

impl Emitter<'_> {
    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_bytes(&self.out.join(rel), bytes)?;
        self.entries.push(ArtifactEntry {
            stage: self.stage.to_string(),
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_vec_pretty(value)?;
        v.push(b'\n');
        self.bytes(rel, &v)
    }
}

fn stamped<T: Serialize>(cfg: &RunConfig, body: &T) -> Value {
    json!({ "run_config": cfg.to_value(), "seed": cfg.seed, "body": body })
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

/// Runs every stage into `out`. With `input = None` a synthetic corpus is
/// generated first; otherwise `input` must hold the corpus layout
/// (`devices.json`, `weather.csv`, `legend.json`, `raw/`, `tiles/`).
/// Artifacts of stages that completed stay on disk when a later stage fails.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, input: Option<&Path>) -> Result<PipelineManifest> {
    cfg.validate()?;
    let mut em = Emitter {
        out,
        stage: "synth",
        entries: Vec::new(),
    };

    let corpus_dir: PathBuf = match input {
        Some(dir) => dir.to_path_buf(),
        None => {
            let dir = out.join("corpus");
            let scfg = SynthConfig {
                seed: cfg.seed,
                n_devices: cfg.synth.n_devices,
                months: cfg.synth.months,
                city_tag: cfg.city_tag.clone(),
                ..SynthConfig::default()
            };
            let written = staged("synth", synth_corpus(&scfg).and_then(|c| write_corpus(&c, &dir)))?;
            for p in written {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                let rel = p.strip_prefix(out).unwrap_or(&p);
                em.entries.push(ArtifactEntry {
                    stage: "synth".into(),
                    path: rel_string(rel),
                    sha256: sha256_hex(&bytes),
                });
            }
            dir
        }
    };

    em.stage = "profile";
    let entries: Vec<DeviceMetaEntry> = staged("profile", read_json(&corpus_dir.join(layout::DEVICES)))?;
    let profiles = staged("profile", profile_stage(&corpus_dir, &entries, &mut em))?;

    em.stage = "ingest";
    let dataset = staged("ingest", ingest_stage(cfg, &corpus_dir, &entries, &profiles, &mut em))?;

    em.stage = "featurize";
    staged("featurize", featurize_stage(cfg, &dataset, &mut em))?;

    em.stage = "train";
    let spec = cfg.spec(cfg.model);
    let artifact = staged(
        "train",
        train_artifact(&dataset, &dataset.device_ids(), &spec, cfg.features(), cfg.seed, cfg.to_value()),
    )?;
    staged("train", em.bytes(&format!("models/{}.json", cfg.model), &artifact.to_json()?))?;

    em.stage = "eval";
    let mut loo = Vec::new();
    for &kind in &cfg.eval_models {
        let setup = EvalSetup {
            dataset: &dataset,
            spec: cfg.spec(kind),
            features: cfg.features(),
            seed: cfg.seed,
        };
        let report = staged("eval", leave_one_out(&setup))?;
        staged("eval", em.json(&format!("reports/loo_{kind}.json"), &stamped(cfg, &report)))?;
        staged("eval", em.bytes(&format!("reports/loo_{kind}.csv"), report.to_csv().as_bytes()))?;
        log::info!("loo {kind}: mean weighted F1 {:.4}", report.mean_weighted_f1);
        loo.push(ModelSummary {
            model: kind,
            mean_weighted_f1: report.mean_weighted_f1,
        });
    }

    let manifest = PipelineManifest {
        run_config: cfg.to_value(),
        seed: cfg.seed,
        input: match input {
            Some(_) => "external".into(),
            None => "synthetic".into(),
        },
        artifacts: em.entries,
        loo,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_bytes(&out.join("manifest.json"), &bytes)?;
    Ok(manifest)
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn profile_stage(
    corpus: &Path,
    entries: &[DeviceMetaEntry],
    em: &mut Emitter,
) -> Result<BTreeMap<String, SpatialProfile>> {
    let legend_path = corpus.join(layout::LEGEND);
    let legend = ColorLegend::from_json(
        &std::fs::read_to_string(&legend_path).map_err(|e| Error::io(&legend_path, e))?,
    )?;
    let mut out = BTreeMap::new();
    for e in entries {
        let tile_path = corpus.join(layout::TILE_DIR).join(format!("{}.ppm", e.device_id));
        let bytes = std::fs::read(&tile_path).map_err(|err| Error::io(&tile_path, err))?;
        let profile = profile_from_raster(&Raster::decode_ppm(&bytes)?, &legend)?;
        em.json(&format!("profiles/{}.json", e.device_id), &profile)?;
        out.insert(e.device_id.clone(), profile);
    }
    Ok(out)
}

fn ingest_stage(
    cfg: &RunConfig,
    corpus: &Path,
    entries: &[DeviceMetaEntry],
    profiles: &BTreeMap<String, SpatialProfile>,
    em: &mut Emitter,
) -> Result<Dataset> {
    let weather = FixtureWeather::load(&corpus.join(layout::WEATHER))?;
    let streams = crate::io::load_raw_dir(&corpus.join(layout::RAW_DIR))?;
    let metas: Vec<DeviceMeta> = entries
        .iter()
        .map(|e| {
            let m = DeviceMeta {
                device_id: e.device_id.clone(),
                latitude: e.lat,
                longitude: e.lon,
                city_tag: e.city_tag.clone(),
                spatial_profile: profiles.get(&e.device_id).cloned(),
            };
            m.validate().map(|_| m)
        })
        .collect::<Result<_>>()?;

    let ing = ingest_streams(&cfg.grid, &streams, metas, &weather)?;
    check_filled(cfg, &ing)?;
    if let Some(d) = ing.dataset.series().find(|(_, r)| r.is_empty()) {
        return Err(Error::Validation(format!("device {} has no usable rows", d.0)));
    }
    let dataset = ing.dataset;

    let mut buf = Vec::new();
    crate::io::write_samples(&mut buf, dataset.series().flat_map(|(_, r)| r.iter()))?;
    em.bytes("ingest/dataset.csv", &buf)?;
    let devices: Vec<DeviceMetaEntry> = entries
        .iter()
        .map(|e| DeviceMetaEntry {
            spatial_profile_path: Some(format!("../profiles/{}.json", e.device_id).into()),
            ..e.clone()
        })
        .collect();
    em.json("ingest/devices.json", &devices)?;
    em.json(
        "ingest/audit.json",
        &stamped(cfg, &json!({ "devices": ing.devices, "excluded_rows": ing.excluded_rows })),
    )?;
    Ok(dataset)
}

/// Fits the scaler on every labeled row and encodes each device.
pub fn featurize(cfg: &RunConfig, dataset: &Dataset) -> Result<(Vec<DeviceRows>, FeatureManifest)> {
    let scaler = fit_scaler(
        dataset
            .series()
            .flat_map(|(_, r)| r.iter())
            .filter(|s| s.label().is_some()),
    )?;
    let fcfg = cfg.features();
    let mut encoded = Vec::new();
    for meta in dataset.devices() {
        encoded.push(encode_device(dataset.samples(&meta.device_id), meta, &scaler, &fcfg)?);
    }
    Ok((encoded, FeatureManifest::new(scaler, cfg.window, cfg.city_tag.clone(), fcfg)))
}

fn featurize_stage(cfg: &RunConfig, dataset: &Dataset, em: &mut Emitter) -> Result<()> {
    let (encoded, manifest) = featurize(cfg, dataset)?;
    let mut buf = Vec::new();
    write_encoded(&mut buf, &encoded)?;
    em.bytes("features/encoded.csv", &buf)?;
    em.json("features/manifest.json", &stamped(cfg, &manifest))?;
    Ok(())
}

/// Share of mandatory grid values that came from forward fill.
pub fn filled_fraction(grid: &GridConfig, devices: &[DeviceIngest]) -> f64 {
    let mut total = FillAudit::default();
    for d in devices {
        total.merge(&d.grid);
    }
    total.filled_fraction(grid)
}

pub fn check_filled(cfg: &RunConfig, ing: &IngestOutput) -> Result<()> {
    let f = filled_fraction(&cfg.grid, &ing.devices);
    if f > cfg.max_filled_fraction {
        return Err(Error::Validation(format!(
            "{:.1}% of mandatory values were forward-filled (limit {:.1}%)",
            100.0 * f,
            100.0 * cfg.max_filled_fraction
        )));
    }
    Ok(())
}

pub struct IngestOutput {
    pub dataset: Dataset,
    pub devices: Vec<DeviceIngest>,
    pub excluded_rows: usize,
}

/// Regularizes each raw stream onto the grid, attaches weather and drops
/// rows above the last AQI band. Fails on any fatal dataset violation.
pub fn ingest_streams(
    grid: &GridConfig,
    streams: &[RawStream],
    metas: Vec<DeviceMeta>,
    weather: &dyn WeatherProvider,
) -> Result<IngestOutput> {
    let retry = RetryPolicy::default();
    let mut samples = Vec::new();
    let mut devices = Vec::new();
    for stream in streams {
        let meta = metas
            .iter()
            .find(|m| m.device_id == stream.device_id())
            .ok_or_else(|| Error::Validation(format!("raw stream for unknown device {}", stream.device_id())))?;
        let reg = regularize(stream, grid);
        let att = attach_weather(&reg.samples, meta, weather, grid.fill_cap, &retry);
        devices.push(DeviceIngest {
            device_id: meta.device_id.clone(),
            grid: reg.audit,
            weather_filled: att.filled,
            weather_dropped: att.dropped,
            weather_errors: att.errors.len(),
            rows: att.samples.len(),
            warnings: reg.warnings,
        });
        samples.extend(att.samples);
    }
    let mut dataset = Dataset::new(metas, samples);
    let excluded_rows = dataset.drop_excluded();
    let fatal: Vec<String> = validate_dataset(&dataset)
        .into_iter()
        .filter(|v| v.is_fatal())
        .map(|v| v.to_string())
        .collect();
    if let Some(first) = fatal.first() {
        return Err(Error::Validation(format!("{} violations, first: {first}", fatal.len())));
    }
    Ok(IngestOutput {
        dataset,
        devices,
        excluded_rows,
    })
}
