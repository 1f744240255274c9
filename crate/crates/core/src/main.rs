use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use aqi_core::calib::{estimate_baseline, sensitivity_agreement, similarity_test, PairedRun};
use aqi_core::config::RunConfig;
use aqi_core::domain::validate_dataset;
use aqi_core::eval::{
    device_ablation, leave_one_out, progressive_deployment, single_source_all, window_sweep, EvalSetup, Labeling,
};
use aqi_core::features::write_encoded;
use aqi_core::ingest::{Field, RawStream};
use aqi_core::io::{
    load_device_meta, load_raw_dir, load_samples, parse_ts, read_json, read_raw_streams, save_samples, write_bytes,
    DeviceMetaEntry,
};
use aqi_core::model::{train_artifact, ModelArtifact, ModelKind};
use aqi_core::pipeline::{check_filled, featurize, ingest_streams, run_pipeline};
use aqi_core::service::http::serve;
use aqi_core::service::{AnnotateRequest, AnnotationService, ServiceConfig};
use aqi_core::spatial::{profile_from_raster, ColorLegend, Raster, SelectionMode};
use aqi_core::synth::{synth_corpus, write_corpus, SynthConfig};
use aqi_core::weather::FixtureWeather;
use aqi_core::{Dataset, DeviceMeta, Error, Result};

#[derive(Parser)]
#[command(name = "aqi", version, about = "Annotate hourly AQI classes from thermo-hygrometer readings")]
struct Cli {
    /// RunConfig JSON; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Hyperparameter preset used when no --config is given.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-device corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long)]
        months: Option<u32>,
    },
    /// Turn land-use tiles into spatial profiles.
    Profile {
        /// A PPM tile or a directory of them.
        #[arg(long, alias = "tile")]
        image: PathBuf,
        #[arg(long)]
        legend: PathBuf,
        /// Output file, or directory when --tile is a directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Regularize raw polls to the hourly grid and attach weather.
    Ingest {
        /// Raw CSV file or directory of them.
        #[arg(long)]
        raw: PathBuf,
        /// Device metadata JSON.
        #[arg(long, alias = "devices")]
        meta: PathBuf,
        #[arg(long = "weather-fixture", alias = "weather")]
        weather: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep rows without PM2.5 (deployment data).
        #[arg(long)]
        thm_only: bool,
        /// Fail when a larger share of mandatory values was forward-filled.
        #[arg(long)]
        max_filled: Option<f64>,
    },
    /// Encode a dataset into feature rows plus a manifest.
    Featurize {
        #[command(flatten)]
        data: DataArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    Train {
        #[arg(long)]
        model: Option<ModelKind>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        window: Option<usize>,
        /// Train every epoch on all windows, without a validation split.
        #[arg(long)]
        no_early_stop: bool,
        #[arg(long)]
        out: PathBuf,
    },
    Eval {
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long)]
        model: Option<ModelKind>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        window: Option<usize>,
        /// Devices removed per ablation level.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2, 3, 4, 5, 6])]
        k: Vec<usize>,
        /// Windows for the window sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 6, 12, 18, 24])]
        windows: Vec<usize>,
        #[arg(long, value_enum, default_value = "ground-truth")]
        labeling: LabelingArg,
        /// Report path (JSON); a CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Calibrate(Calibrate),
    /// Annotate a CSV of requests offline.
    Annotate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weather: PathBuf,
        /// Device metadata with spatial profiles; rows name these devices.
        #[arg(long)]
        locations: PathBuf,
        /// CSV with location,timestamp,temperature,humidity.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weather: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Run every stage end to end.
    Run {
        #[arg(long)]
        out: PathBuf,
        /// Existing corpus directory instead of a synthetic one.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Device metadata; defaults to devices.json next to the dataset.
    #[arg(long)]
    devices: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Calibrate {
    /// Zero-air offset from a candidate run.
    Baseline {
        #[command(flatten)]
        io: CalibArgs,
        /// Dataset CSV to correct with the estimated offset.
        #[arg(long)]
        apply: Option<PathBuf>,
    },
    /// Welch test of candidate against reference.
    Compare {
        #[command(flatten)]
        io: CalibArgs,
    },
    /// Correlation of candidate and reference during an event.
    Sensitivity {
        #[command(flatten)]
        io: CalibArgs,
        #[arg(long)]
        event_start: String,
        #[arg(long)]
        event_end: String,
    },
}

#[derive(Args)]
struct CalibArgs {
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    candidate: PathBuf,
    #[arg(long, default_value = "pm25")]
    field: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Loo,
    Similarity,
    Distance,
    Ablation,
    Progressive,
    WindowSweep,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelingArg {
    GroundTruth,
    SelfTrain,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose {
        "info"
    } else {
        "warn"
    }))
    .init();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(3),
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&cli.preset)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::Synth { out, devices, months } => {
            let scfg = SynthConfig {
                seed: cfg.seed,
                n_devices: devices.unwrap_or(cfg.synth.n_devices),
                months: months.unwrap_or(cfg.synth.months),
                city_tag: cfg.city_tag.clone(),
                ..SynthConfig::default()
            };
            let corpus = synth_corpus(&scfg)?;
            let written = write_corpus(&corpus, &out)?;
            println!(
                "wrote {} files for {} devices to {}",
                written.len(),
                corpus.devices.len(),
                out.display()
            );
        }
        Command::Profile { image: tile, legend, out } => {
            let legend = ColorLegend::from_json(&read_text(&legend)?)?;
            if tile.is_dir() {
                let mut tiles: Vec<PathBuf> = std::fs::read_dir(&tile)
                    .map_err(|e| Error::io(&tile, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
                    .collect();
                tiles.sort();
                for t in &tiles {
                    let stem = t.file_stem().expect("file has a stem").to_string_lossy();
                    write_pretty(&out.join(format!("{stem}.json")), &profile_of(t, &legend)?)?;
                }
                println!("wrote {} profiles to {}", tiles.len(), out.display());
            } else {
                write_pretty(&out, &profile_of(&tile, &legend)?)?;
            }
        }
        Command::Ingest {
            raw,
            meta: devices,
            weather,
            out,
            thm_only,
            max_filled,
        } => {
            if thm_only {
                cfg.grid.require_pm25 = false;
            }
            if let Some(m) = max_filled {
                cfg.max_filled_fraction = m;
            }
            cfg.validate()?;
            let streams: Vec<RawStream> = if raw.is_dir() {
                load_raw_dir(&raw)?
            } else {
                read_raw_streams(std::fs::File::open(&raw).map_err(|e| Error::io(&raw, e))?)?
            };
            let entries: Vec<DeviceMetaEntry> = read_json(&devices)?;
            let metas = entries
                .into_iter()
                .map(|e| {
                    let m = DeviceMeta {
                        device_id: e.device_id,
                        latitude: e.lat,
                        longitude: e.lon,
                        city_tag: e.city_tag,
                        spatial_profile: None,
                    };
                    m.validate().map(|_| m)
                })
                .collect::<Result<Vec<_>>>()?;
            let provider = FixtureWeather::load(&weather)?;
            let ing = ingest_streams(&cfg.grid, &streams, metas, &provider)?;
            save_samples(&out, ing.dataset.series().flat_map(|(_, r)| r.iter()))?;
            write_pretty(
                &out.with_extension("audit.json"),
                &stamp(&cfg, &json!({ "devices": ing.devices, "excluded_rows": ing.excluded_rows })),
            )?;
            println!("{} rows -> {}", ing.dataset.n_samples(), out.display());
            check_filled(&cfg, &ing)?;
        }
        Command::Featurize { data, out } => {
            let ds = load_dataset(&data)?;
            let (rows, manifest) = featurize(&cfg, &ds)?;
            let mut buf = Vec::new();
            write_encoded(&mut buf, &rows)?;
            write_bytes(&out.join("encoded.csv"), &buf)?;
            write_pretty(&out.join("manifest.json"), &stamp(&cfg, &manifest))?;
            println!("encoded {} rows", rows.iter().map(|r| r.rows.len()).sum::<usize>());
        }
        Command::Train {
            model,
            data,
            window,
            no_early_stop,
            out,
        } => {
            if no_early_stop {
                cfg.lstm.patience = None;
                cfg.lstm.val_fraction = 0.0;
            }
            apply_overrides(&mut cfg, model, window)?;
            let ds = load_dataset(&data)?;
            let artifact = train_artifact(
                &ds,
                &ds.device_ids(),
                &cfg.spec(cfg.model),
                cfg.features(),
                cfg.seed,
                cfg.to_value(),
            )?;
            artifact.save(&out)?;
            println!(
                "trained {} on {} windows; version {}",
                artifact.kind,
                artifact.n_train_instances,
                artifact.version()?
            );
        }
        Command::Eval {
            protocol,
            model,
            data,
            window,
            k,
            windows,
            labeling,
            out,
        } => {
            apply_overrides(&mut cfg, model, window)?;
            let ds = load_dataset(&data)?;
            let setup = EvalSetup {
                dataset: &ds,
                spec: cfg.spec(cfg.model),
                features: cfg.features(),
                seed: cfg.seed,
            };
            let (body, csv, summary) = match protocol {
                Protocol::Loo => {
                    let r = leave_one_out(&setup)?;
                    let s = format!("mean weighted F1 {:.4}", r.mean_weighted_f1);
                    (serde_json::to_value(&r)?, r.to_csv(), s)
                }
                Protocol::Similarity | Protocol::Distance => {
                    let mode = match protocol {
                        Protocol::Similarity => SelectionMode::Similarity,
                        _ => SelectionMode::Distance,
                    };
                    let r = single_source_all(&setup, mode)?;
                    let s = format!("mean weighted F1 {:.4}", r.mean_weighted_f1);
                    (serde_json::to_value(&r)?, r.to_csv(), s)
                }
                Protocol::Ablation => {
                    let r = device_ablation(&setup, cfg.seed, &k)?;
                    let s = r
                        .levels
                        .iter()
                        .map(|l| format!("k={} F1 {:.4}", l.k, l.mean_weighted_f1))
                        .collect::<Vec<_>>()
                        .join(", ");
                    (serde_json::to_value(&r)?, r.to_csv(), s)
                }
                Protocol::Progressive => {
                    let lab = match labeling {
                        LabelingArg::GroundTruth => Labeling::GroundTruth,
                        LabelingArg::SelfTrain => Labeling::SelfTrain,
                    };
                    let r = progressive_deployment(&setup, cfg.seed, lab)?;
                    let s = format!("held out {}, base F1 {:.4}", r.held_out, r.base_f1);
                    (serde_json::to_value(&r)?, r.to_csv(), s)
                }
                Protocol::WindowSweep => {
                    let r = window_sweep(&setup, &windows)?;
                    (serde_json::to_value(&r)?, r.to_csv(), format!("{} windows", windows.len()))
                }
            };
            write_pretty(&out, &stamp(&cfg, &body))?;
            write_bytes(&out.with_extension("csv"), csv.as_bytes())?;
            println!("{summary}");
        }
        Command::Calibrate(c) => calibrate(&cfg, c)?,
        Command::Annotate {
            model,
            weather,
            locations,
            input,
            out,
        } => annotate_batch(&model, &weather, &locations, &input, &out)?,
        Command::Serve { model, weather, addr } => {
            let artifact = ModelArtifact::load(&model)?;
            let provider = Arc::new(FixtureWeather::load(&weather)?);
            let svc = Arc::new(AnnotationService::new(artifact, provider, ServiceConfig {
                fill_cap: cfg.grid.fill_cap,
                ..ServiceConfig::default()
            })?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<tokio runtime>", e))?;
            rt.block_on(async move {
                tokio::select! {
                    r = serve(svc, addr) => r,
                    _ = tokio::signal::ctrl_c() => Ok(()),
                }
            })?;
        }
        Command::Run { out, input } => {
            let m = run_pipeline(&cfg, &out, input.as_deref())?;
            for s in &m.loo {
                println!("{}: leave-one-out mean weighted F1 {:.4}", s.model, s.mean_weighted_f1);
            }
            println!("{} artifacts, manifest at {}", m.artifacts.len(), out.join("manifest.json").display());
        }
    }
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, model: Option<ModelKind>, window: Option<usize>) -> Result<()> {
    if let Some(m) = model {
        cfg.model = m;
    }
    if let Some(w) = window {
        cfg.window = w;
    }
    cfg.validate()
}

fn stamp<T: Serialize>(cfg: &RunConfig, body: &T) -> serde_json::Value {
    json!({ "run_config": cfg.to_value(), "seed": cfg.seed, "body": body })
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

fn write_pretty<T: Serialize>(p: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write_bytes(p, &bytes)
}

fn profile_of(tile: &Path, legend: &ColorLegend) -> Result<aqi_core::spatial::SpatialProfile> {
    let bytes = std::fs::read(tile).map_err(|e| Error::io(tile, e))?;
    profile_from_raster(&Raster::decode_ppm(&bytes)?, legend)
}

fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    let devices = match &args.devices {
        Some(p) => p.clone(),
        None => args
            .data
            .parent()
            .unwrap_or(Path::new("."))
            .join("devices.json"),
    };
    let mut ds = Dataset::new(load_device_meta(&devices)?, load_samples(&args.data)?);
    let dropped = ds.drop_excluded();
    if dropped > 0 {
        log::warn!("dropped {dropped} rows above the last AQI band");
    }
    if let Some(v) = validate_dataset(&ds).into_iter().find(|v| v.is_fatal()) {
        return Err(Error::Validation(v.to_string()));
    }
    Ok(ds)
}

fn parse_field(s: &str) -> Result<Field> {
    Field::parse(s).ok_or_else(|| Error::Config(format!("unknown field `{s}` (pm25, temperature, humidity)")))
}

fn paired(io: &CalibArgs, field: Field) -> Result<PairedRun> {
    let reference = io
        .reference
        .as_ref()
        .ok_or_else(|| Error::Config("--ref is required".into()))?;
    PairedRun::align(&load_samples(reference)?, &load_samples(&io.candidate)?, field)
}

fn calibrate(cfg: &RunConfig, c: Calibrate) -> Result<()> {
    match c {
        Calibrate::Baseline { io, apply } => {
            let field = parse_field(&io.field)?;
            let state = estimate_baseline(&load_samples(&io.candidate)?, field)?;
            let mut body = json!({ "baseline": state });
            if let Some(raw_path) = apply {
                let mut rows = load_samples(&raw_path)?;
                let mut clamped = 0;
                for s in &mut rows {
                    let slot = match field {
                        Field::Pm25 => s.pm25.as_mut(),
                        Field::Temperature => Some(&mut s.temperature),
                        Field::Humidity => Some(&mut s.humidity),
                    };
                    if let Some(v) = slot {
                        let (x, c) = state.correct(*v);
                        *v = x;
                        clamped += c as usize;
                    }
                }
                let corrected = io.out.with_extension("corrected.csv");
                save_samples(&corrected, &rows)?;
                body["corrected"] = json!({ "path": corrected, "rows": rows.len(), "clamped": clamped });
            }
            println!("offset {:.4} from {} readings", state.offset, state.n);
            write_pretty(&io.out, &stamp(cfg, &body))
        }
        Calibrate::Compare { io } => {
            let run = paired(&io, parse_field(&io.field)?)?;
            let w = similarity_test(&run)?;
            println!("t {:.4}, df {:.2}, p {:.4}: {}", w.t, w.df, w.p_value, verdict(w.pass));
            write_pretty(
                &io.out,
                &stamp(cfg, &json!({ "field": run.field, "n": run.len(), "welch": w })),
            )
        }
        Calibrate::Sensitivity {
            io,
            event_start,
            event_end,
        } => {
            let run = paired(&io, parse_field(&io.field)?)?;
            let (a, b) = (parse_ts(&event_start)?, parse_ts(&event_end)?);
            let range = event_range(&run.timestamps, a, b)?;
            let agreement = sensitivity_agreement(&run, range.clone())?;
            println!("r {:?}: {}", agreement.pearson_r, verdict(agreement.pass));
            write_pretty(
                &io.out,
                &stamp(
                    cfg,
                    &json!({ "field": run.field, "event_points": range.len(), "agreement": agreement }),
                ),
            )
        }
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "fail"
    }
}

fn event_range(ts: &[DateTime<Utc>], start: DateTime<Utc>, end: DateTime<Utc>) -> Result<std::ops::Range<usize>> {
    let lo = ts.partition_point(|t| *t < start);
    let hi = ts.partition_point(|t| *t <= end);
    if lo >= hi {
        return Err(Error::invalid("no shared readings inside the event window"));
    }
    Ok(lo..hi)
}

#[derive(serde::Deserialize)]
struct RequestRow {
    location: String,
    timestamp: String,
    temperature: f64,
    humidity: f64,
}

fn annotate_batch(model: &Path, weather: &Path, locations: &Path, input: &Path, out: &Path) -> Result<()> {
    let artifact = ModelArtifact::load(model)?;
    let provider = Arc::new(FixtureWeather::load(weather)?);
    let svc = AnnotationService::new(artifact, provider, ServiceConfig::default())?;
    let mut ids = std::collections::BTreeMap::new();
    for m in load_device_meta(locations)? {
        let id = svc.register_profile(m.latitude, m.longitude, m.profile()?.clone())?;
        ids.insert(m.device_id, id);
    }
    let file = std::fs::File::open(input).map_err(|e| Error::io(input, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "location",
        "timestamp",
        "status",
        "aqi_class",
        "p1",
        "p2",
        "p3",
        "p4",
        "p5",
        "history_state",
        "history_hours",
        "model_version",
    ])?;
    let (mut ok, mut failed) = (0, 0);
    for row in rdr.deserialize() {
        let row: RequestRow = row?;
        let location_id = ids
            .get(&row.location)
            .cloned()
            .ok_or_else(|| Error::UnregisteredLocation(row.location.clone()))?;
        let req = AnnotateRequest {
            location_id,
            timestamp: parse_ts(&row.timestamp)?,
            temperature_c: row.temperature,
            humidity_pct: row.humidity,
        };
        let mut rec = vec![row.location.clone(), row.timestamp.clone()];
        match svc.annotate(&req) {
            Ok(r) => {
                ok += 1;
                rec.push("ok".into());
                rec.push(r.aqi_class.value().to_string());
                rec.extend(r.probabilities.iter().map(|p| p.to_string()));
                rec.push(serde_json::to_value(r.history_state)?.as_str().unwrap_or_default().to_string());
                rec.push(r.history_hours.to_string());
                rec.push(r.model_version);
            }
            Err(e) => {
                failed += 1;
                rec.push(e.to_string());
                rec.extend(std::iter::repeat_n(String::new(), 9));
            }
        }
        wtr.write_record(&rec)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::io(out, e.into_error()))?;
    write_bytes(out, &bytes)?;
    println!("{ok} annotated, {failed} failed");
    Ok(())
}
