//! Command-line front end. Every subcommand maps onto a library call; the
//! binary only forwards `std::env::args` to [`run_cli`].

use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{run_job, JobLibrary, JobSpec};
use crate::api::{self, ApiConfig, ApiState};
use crate::fixture::Fixture;
use crate::forecast::{
    correct::{CorrectionPolicy, Watcher},
    default_grid, fit_candidates, persist_forecast, predict, run_forecast, select_best, FitConfig, FittedModel,
    ForecastRequest, ModelSpec, SeriesWindow,
};
use crate::geo::{export_geojson, write_geojson};
use crate::hypertable::{self, CursorMode, HierarchyMap, TimeCursor};
use crate::ingest::{
    consolidate, immerse, normalize, read_ndjson, write_ndjson, DeviceMap, IntervalPolicy, RangeRules, RawReading,
    Source, SourcedReadings, UnitRegistry,
};
use crate::mesh::{Frame, LeakAlert, Mesh, Transport};
use crate::model::{Metric, MetricKey, ObjectId, Timestamp, Window};
use crate::scenario::{
    prepare_simulation, scenario_mesh, scenario_run, ExogPoint, FailureReport, ModesFile, ScenarioConfig,
    ScenarioError,
};
use crate::store::{audit_dir, Agg, CubeStore, Grain, ObjectSel, SliceSpec, StoreConfig};

pub const ENV_STORE: &str = "HEATGRID_STORE";
pub const ENV_TOKEN: &str = "HEATGRID_TOKEN";

/// Process exit class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Runtime,
    Audit,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
            ErrorKind::Audit => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{code}: {message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl CliError {
    pub fn validation(code: &str, message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Validation,
            code: code.into(),
            message: message.into(),
            details: serde_json::Value::Null,
        }
    }

    pub fn runtime(code: &str, message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Runtime,
            ..CliError::validation(code, message)
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::runtime("io", format!("{}: {e}", path.display()))
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        let kind = if e.is_validation() {
            ErrorKind::Validation
        } else {
            ErrorKind::Runtime
        };
        CliError {
            kind,
            code: e.code().into(),
            message: e.to_string(),
            details: serde_json::Value::Null,
        }
    }
}

impl From<api::ApiError> for CliError {
    fn from(e: api::ApiError) -> Self {
        let kind = if (400..500).contains(&e.status) {
            ErrorKind::Validation
        } else {
            ErrorKind::Runtime
        };
        CliError {
            kind,
            code: e.code,
            message: e.message,
            details: serde_json::Value::Null,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::from(api::ApiError::from(e))
            }
        }
    )*};
}
runtime_from!(
    crate::store::StoreError,
    crate::ingest::IngestError,
    crate::aggregate::AggregateError,
    crate::forecast::ForecastError,
    crate::hypertable::HyperTableError
);

#[derive(Debug, Parser)]
#[command(name = "heatgrid", version, about = "District heating monitoring toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate, ingest, analyze and report end to end.
    Run(RunArgs),
    /// Run the collection network alone and write its frame trace.
    Simulate(SimulateArgs),
    /// Normalize, consolidate and immerse readings into a store.
    Ingest(IngestArgs),
    /// Map/reduce jobs over store slices.
    #[command(subcommand)]
    Aggregate(AggregateCommand),
    /// Fit, predict and watch consumption forecasts.
    #[command(subcommand)]
    Forecast(ForecastCommand),
    /// Build a hyper table report.
    Hypertable(HypertableArgs),
    /// Export hyper-table leaves as GeoJSON points.
    ExportGeojson(GeojsonArgs),
    /// Store administration.
    #[command(subcommand)]
    Store(StoreCommand),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Frame trace (NDJSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Leak alerts (NDJSON).
    #[arg(long)]
    pub alerts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StoreArg {
    #[arg(long, env = ENV_STORE)]
    pub store: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// One raw reading per line.
    Raw,
    /// One network frame per line, as written by `simulate`.
    Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Mesh,
    Cellular,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "raw")]
    pub format: InputFormat,
    /// Transport for raw input.
    #[arg(long, value_enum, default_value = "mesh")]
    pub source: SourceArg,
    #[arg(long)]
    pub devices: PathBuf,
    #[arg(long)]
    pub units: Option<PathBuf>,
    /// Where to write rejected records (NDJSON).
    #[arg(long)]
    pub rejects: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TextFormat {
    Json,
    Text,
}

#[derive(Debug, Subcommand)]
pub enum AggregateCommand {
    Run(AggregateArgs),
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[arg(long = "map", default_value = "object_value")]
    pub map_fn: String,
    #[arg(long = "reduce", default_value = "sum")]
    pub reduce_fn: String,
    #[arg(long, default_value = "heat_energy_kwh")]
    pub metric: String,
    #[arg(long, value_parser = parse_ts)]
    pub from: Timestamp,
    #[arg(long, value_parser = parse_ts)]
    pub to: Timestamp,
    #[arg(long, default_value = "raw")]
    pub grain: Grain,
    #[arg(long, default_value = "sum")]
    pub agg: Agg,
    #[arg(long, default_value_t = crate::aggregate::default_workers())]
    pub workers: usize,
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: TextFormat,
}

#[derive(Debug, Args)]
pub struct SeriesArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[arg(long)]
    pub object: String,
    #[arg(long, default_value = "heat_energy_kwh")]
    pub metric: String,
    /// Training window start; defaults to the whole stream.
    #[arg(long, value_parser = parse_ts)]
    pub from: Option<Timestamp>,
    #[arg(long, value_parser = parse_ts)]
    pub to: Option<Timestamp>,
    /// Outdoor temperature series (NDJSON `{ts, value}`).
    #[arg(long)]
    pub weather: Option<PathBuf>,
    /// Candidate grid (JSON list of model specs).
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub holdout: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum ForecastCommand {
    /// Fit the grid and print the fit report with the selected model.
    Fit {
        #[command(flatten)]
        series: SeriesArgs,
        /// Also write the selected model here.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Fit (or load), predict and persist a forecast.
    Predict {
        #[command(flatten)]
        series: SeriesArgs,
        #[arg(long, default_value_t = 24)]
        horizon: usize,
        #[arg(long)]
        scenario: Option<String>,
        /// Predict from this saved model instead of fitting.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Replay stored actuals after the training window through online
    /// correction, printing one decision per step.
    Watch {
        #[command(flatten)]
        series: SeriesArgs,
        /// End of the replay; defaults to the end of the stream.
        #[arg(long, value_parser = parse_ts)]
        until: Option<Timestamp>,
        #[arg(long, default_value_t = 0.15)]
        threshold: f64,
        #[arg(long, default_value_t = 24)]
        eval_window: usize,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Present for symmetry with `predict`; watch never persists.
        #[arg(long, default_value_t = 24)]
        horizon: usize,
    },
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// TOML with a `modes` array.
    #[arg(long)]
    pub modes: PathBuf,
    #[arg(long)]
    pub mode: String,
    #[arg(long, value_parser = parse_ts)]
    pub from: Timestamp,
    #[arg(long, value_parser = parse_ts)]
    pub to: Timestamp,
    #[arg(long, value_enum, default_value = "archive")]
    pub cursor: CursorArg,
    #[arg(long)]
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CursorArg {
    Archive,
    Current,
    Forecast,
    Scenario,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct HypertableArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[arg(long, value_enum, default_value = "text")]
    pub format: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GeojsonArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[arg(long)]
    pub devices: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum StoreCommand {
    /// Verify placement and checksums of every block replica.
    Audit(StoreArg),
    FailNode {
        #[command(flatten)]
        store: StoreArg,
        node: String,
    },
    RecoverNode {
        #[command(flatten)]
        store: StoreArg,
        node: String,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, env = ENV_STORE)]
    pub store: Option<PathBuf>,
    #[arg(long, env = ENV_TOKEN, hide_env_values = true)]
    pub token: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

/// `serve --config` file: the listener settings plus the tables the API
/// needs. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    #[serde(flatten)]
    pub api: ApiConfig,
    pub hierarchy: Option<PathBuf>,
    pub modes: Option<PathBuf>,
    pub devices: Option<PathBuf>,
    pub weather: Option<PathBuf>,
    pub alerts: Option<PathBuf>,
    pub topology: Option<PathBuf>,
}

/// Accepts unix seconds or RFC 3339.
pub fn parse_ts(s: &str) -> Result<Timestamp, String> {
    if let Ok(n) = s.parse::<i64>() {
        return Ok(n);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|d| d.timestamp())
        .map_err(|e| format!("`{s}` is neither unix seconds nor RFC 3339: {e}"))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::validation("missing_file", format!("{}: {e}", path.display())))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    toml::from_str(&read_text(path)?).map_err(|e| CliError::validation("invalid_config", format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::validation("invalid_input", format!("{}: {e}", path.display())))
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::validation("missing_file", format!("{}: {e}", path.display())))?;
    read_ndjson(BufReader::new(f)).map_err(|e| CliError::validation("invalid_input", format!("{}: {e}", path.display())))
}

pub fn read_weather(path: &Path) -> Result<BTreeMap<Timestamp, f64>, CliError> {
    Ok(read_rows::<ExogPoint>(path)?.into_iter().map(|p| (p.ts, p.value)).collect())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_ndjson(&mut w, rows).map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn metric_arg(s: &str) -> Result<Metric, CliError> {
    Metric::from_code(s).ok_or_else(|| CliError::validation("unknown_metric", format!("unknown metric `{s}`")))
}

/// Opens an existing store; administration and queries never create one.
fn open_store(path: &Path) -> Result<CubeStore, CliError> {
    if !CubeStore::exists(path) {
        return Err(CliError::validation("no_store", format!("no store at {}", path.display())));
    }
    Ok(CubeStore::open(path, StoreConfig::default())?)
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    writeln!(out, "{text}").map_err(|e| CliError::runtime("io", e.to_string()))
}

fn emit_text(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::runtime("io", e.to_string()))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Results go to `out`; failures are reported on `err`
/// as a JSON object.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => ErrorKind::Validation.exit_code(),
            };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", serde_json::to_string(&e).expect("serializable"));
            e.kind.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Run(a) => cmd_run(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Ingest(a) => cmd_ingest(a, out),
        Command::Aggregate(AggregateCommand::Run(a)) => cmd_aggregate(a, out),
        Command::Forecast(c) => cmd_forecast(c, out),
        Command::Hypertable(a) => cmd_hypertable(a, out),
        Command::ExportGeojson(a) => cmd_geojson(a, out),
        Command::Store(c) => cmd_store(c, out),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn cmd_run(a: RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (config, base) = ScenarioConfig::load(&a.config)?;
    match scenario_run(&config, &base, &a.out) {
        Ok(run) => emit_json(out, &run.manifest),
        Err(e) => {
            let report = FailureReport::of(&e);
            if std::fs::create_dir_all(&a.out).is_ok() {
                let text = serde_json::to_string_pretty(&report).expect("serializable");
                let _ = std::fs::write(a.out.join("failure.json"), text + "\n");
            }
            Err(e.into())
        }
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    frames: u64,
    stats: crate::mesh::MeshStats,
    buffered_readings: u64,
    alerts: Vec<LeakAlert>,
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (config, _) = ScenarioConfig::load(&a.config)?;
    let fixture = Fixture::new(config.fixture.clone());
    let mesh = scenario_mesh(&config, &fixture)?;
    let (mut sim, drain) = prepare_simulation(&config, &fixture, mesh)?;
    let f = std::fs::File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut w = std::io::BufWriter::new(f);
    let mut frames = 0u64;
    let mut failure = None;
    sim.run_until(drain, |frame| {
        frames += 1;
        let r = serde_json::to_writer(&mut w, &frame).map_err(std::io::Error::from).and_then(|_| w.write_all(b"\n"));
        if let Err(e) = r {
            failure.get_or_insert(e);
        }
    });
    if let Some(e) = failure {
        return Err(CliError::io(&a.out, e));
    }
    w.flush().map_err(|e| CliError::io(&a.out, e))?;
    let alerts = sim.alerts();
    if let Some(path) = &a.alerts {
        write_rows(path, &alerts)?;
    }
    emit_json(
        out,
        &SimulateSummary {
            frames,
            stats: sim.stats(),
            buffered_readings: sim.buffered_readings(),
            alerts,
        },
    )
}

#[derive(Serialize)]
struct IngestSummary {
    receipt: Option<crate::store::AppendReceipt>,
    readings: usize,
    rejected: usize,
    reject_summary: BTreeMap<String, usize>,
}

fn cmd_ingest(a: IngestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let devices = DeviceMap::from_toml(&read_text(&a.devices)?)
        .map_err(|e| CliError::validation("invalid_config", format!("{}: {e}", a.devices.display())))?;
    let registry = match &a.units {
        Some(p) => UnitRegistry::from_toml(&read_text(p)?)
            .map_err(|e| CliError::validation("invalid_config", format!("{}: {e}", p.display())))?,
        None => UnitRegistry::default(),
    };
    let by_source: Vec<(Source, Vec<RawReading>)> = match a.format {
        InputFormat::Raw => {
            let source = match a.source {
                SourceArg::Mesh => Source::Mesh,
                SourceArg::Cellular => Source::Cellular,
            };
            vec![(source, read_rows(&a.input)?)]
        }
        InputFormat::Trace => {
            let (mut mesh, mut cell) = (Vec::new(), Vec::new());
            for f in read_rows::<Frame>(&a.input)? {
                match f.transport {
                    Transport::Mesh => mesh.extend(f.payload),
                    Transport::Cellular => cell.extend(f.payload),
                }
            }
            vec![(Source::Mesh, mesh), (Source::Cellular, cell)]
        }
    };
    let rules = RangeRules::default();
    let mut inputs = Vec::new();
    let mut rejects = Vec::new();
    let mut reject_summary = BTreeMap::new();
    for (source, raw) in by_source {
        let n = normalize(&raw, &registry, &devices, &rules);
        rejects.extend(n.reject_rows());
        for (code, count) in n.reject_summary() {
            *reject_summary.entry(code.to_string()).or_insert(0) += count;
        }
        inputs.push(SourcedReadings {
            source,
            readings: n.readings,
        });
    }
    if let Some(p) = &a.rejects {
        write_rows(p, &rejects)?;
    }
    let batch = consolidate(&inputs, &IntervalPolicy::default());
    let store = CubeStore::open(&a.store.store, StoreConfig::default())?;
    let receipt = if batch.readings.is_empty() {
        None
    } else {
        Some(immerse(&batch, &store)?)
    };
    emit_json(
        out,
        &IngestSummary {
            receipt,
            readings: batch.readings.len(),
            rejected: rejects.len(),
            reject_summary,
        },
    )
}

fn cmd_aggregate(a: AggregateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let key: MetricKey = a
        .metric
        .parse()
        .map_err(|e: crate::model::BadMetricKey| CliError::validation("unknown_metric", e.to_string()))?;
    let spec = JobSpec {
        input: SliceSpec::new(ObjectSel::All, [key], Window::new(a.from, a.to), a.grain, a.agg),
        map_fn: a.map_fn,
        reduce_fn: a.reduce_fn,
        workers: a.workers,
        top_k: a.top,
    };
    let store = open_store(&a.store.store)?;
    let result = run_job(&spec, &store, &JobLibrary::default())?;
    match a.format {
        TextFormat::Json => emit_json(out, &result),
        TextFormat::Text => emit_text(out, &result.to_text()),
    }
}

fn request_for(s: &SeriesArgs, horizon: usize) -> Result<ForecastRequest, CliError> {
    let window = match (s.from, s.to) {
        (Some(from), Some(to)) => Some(Window::new(from, to)),
        (None, None) => None,
        _ => return Err(CliError::validation("invalid_window", "give both --from and --to, or neither")),
    };
    Ok(ForecastRequest {
        window,
        grid: s.grid.as_deref().map(read_json::<Vec<ModelSpec>>).transpose()?,
        holdout: s.holdout,
        ..ForecastRequest::new(ObjectId::new(s.object.clone()), metric_arg(&s.metric)?, horizon)
    })
}

fn load_series(store: &CubeStore, req: &ForecastRequest, weather: Option<&BTreeMap<Timestamp, f64>>) -> Result<SeriesWindow, CliError> {
    let key = MetricKey::Actual(req.metric);
    let window = match req.window {
        Some(w) => w,
        None => {
            let (first, last) = store.stream_span(&req.object_id, &key).ok_or_else(|| {
                CliError::from(crate::forecast::ForecastError::UnknownSeries {
                    object: req.object_id.clone(),
                    metric: req.metric,
                })
            })?;
            Window::new(first, last + 1)
        }
    };
    let series = SeriesWindow::from_store(store, &req.object_id, req.metric, window, req.step)?;
    Ok(match weather {
        Some(w) => series.with_exog(w.clone()),
        None => series,
    })
}

#[derive(Serialize)]
struct FitOutput {
    selected: FittedModel,
    report: crate::forecast::FitReport,
}

#[derive(Serialize)]
struct WatchOutput {
    initial: FittedModel,
    refits: usize,
    log: Vec<crate::forecast::correct::CorrectionLogEntry>,
    r#final: FittedModel,
}

fn cmd_forecast(c: ForecastCommand, out: &mut dyn Write) -> Result<(), CliError> {
    match c {
        ForecastCommand::Fit { series, model_out } => {
            let store = open_store(&series.store.store)?;
            let weather = series.weather.as_deref().map(read_weather).transpose()?;
            let req = request_for(&series, 1)?;
            let s = load_series(&store, &req, weather.as_ref())?;
            let grid = req.grid.clone().unwrap_or_else(default_grid);
            let config = req.holdout.map(|holdout| FitConfig { holdout }).unwrap_or_else(|| FitConfig::for_step(req.step));
            let report = fit_candidates(&s, &grid, config, store.version())?;
            let selected = select_best(&report.fitted)?.clone();
            if let Some(p) = &model_out {
                let text = serde_json::to_string_pretty(&selected).expect("serializable");
                std::fs::write(p, text + "\n").map_err(|e| CliError::io(p, e))?;
            }
            emit_json(out, &FitOutput { selected, report })
        }
        ForecastCommand::Predict {
            series,
            horizon,
            scenario,
            model,
        } => {
            let store = open_store(&series.store.store)?;
            let weather = series.weather.as_deref().map(read_weather).transpose()?;
            let req = ForecastRequest {
                scenario,
                ..request_for(&series, horizon)?
            };
            match model {
                None => emit_json(out, &run_forecast(&store, &req, weather.as_ref())?),
                Some(p) => {
                    let model: FittedModel = read_json(&p)?;
                    let s = load_series(&store, &req, weather.as_ref())?;
                    let forecast = predict(&model, &s, horizon)?;
                    let persisted = persist_forecast(&store, &forecast, req.scenario.as_deref())?;
                    emit_json(out, &serde_json::json!({"forecast": forecast, "persisted": persisted}))
                }
            }
        }
        ForecastCommand::Watch {
            series,
            until,
            threshold,
            eval_window,
            model,
            horizon: _,
        } => {
            let store = open_store(&series.store.store)?;
            let weather = series.weather.as_deref().map(read_weather).transpose()?;
            let req = request_for(&series, 1)?;
            let history = load_series(&store, &req, weather.as_ref())?;
            let grid = req.grid.clone().unwrap_or_else(default_grid);
            let initial = match model {
                Some(p) => read_json::<FittedModel>(&p)?,
                None => {
                    let config = req.holdout.map(|holdout| FitConfig { holdout }).unwrap_or_else(|| FitConfig::for_step(req.step));
                    crate::forecast::fit_and_select(&history, &grid, config, store.version())?.0
                }
            };
            let end = history
                .end_ts()
                .map(|t| t + history.step)
                .ok_or_else(|| CliError::validation("empty_series", "training window is empty"))?;
            let key = MetricKey::Actual(req.metric);
            let stop = match until {
                Some(t) => t,
                None => store.stream_span(&req.object_id, &key).map_or(end, |(_, last)| last + 1),
            };
            let policy = CorrectionPolicy {
                threshold,
                eval_window,
            };
            let mut watcher = Watcher::new(initial.clone(), history, policy, grid);
            if stop > end {
                let replay = SeriesWindow::from_store(&store, &req.object_id, req.metric, Window::new(end, stop), req.step)?;
                for p in replay.points {
                    let x = weather.as_ref().and_then(|w| w.get(&p.ts).copied());
                    watcher.observe(p, x)?;
                }
            }
            emit_json(
                out,
                &WatchOutput {
                    initial,
                    refits: watcher.refits(),
                    log: watcher.log().to_vec(),
                    r#final: watcher.model().clone(),
                },
            )
        }
    }
}

fn cursor_of(t: &TableArgs) -> TimeCursor {
    TimeCursor {
        interval: Window::new(t.from, t.to),
        mode: match t.cursor {
            CursorArg::Archive => CursorMode::Archive,
            CursorArg::Current => CursorMode::Current,
            CursorArg::Forecast => CursorMode::Forecast,
            CursorArg::Scenario => CursorMode::Scenario,
        },
        scenario: t.scenario.clone(),
    }
}

fn table_inputs(t: &TableArgs) -> Result<(CubeStore, HierarchyMap, crate::hypertable::AggMode), CliError> {
    let hierarchy: HierarchyMap = read_toml(&t.hierarchy)?;
    let modes: ModesFile = read_toml(&t.modes)?;
    let mode = modes
        .modes
        .into_iter()
        .find(|m| m.id == t.mode)
        .ok_or_else(|| CliError::validation("unknown_mode", format!("no mode `{}` in {}", t.mode, t.modes.display())))?;
    Ok((open_store(&t.store.store)?, hierarchy, mode))
}

fn cmd_hypertable(a: HypertableArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (store, hierarchy, mode) = table_inputs(&a.table)?;
    let table = hypertable::build(&store, &hierarchy, &mode, &cursor_of(&a.table))?;
    let report = table.to_report();
    let text = match a.format {
        ReportFormat::Text => report.text,
        ReportFormat::Json => report.json,
        ReportFormat::Csv => report.csv,
    };
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => emit_text(out, &text),
    }
}

fn cmd_geojson(a: GeojsonArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (store, hierarchy, mode) = table_inputs(&a.table)?;
    let devices = DeviceMap::from_toml(&read_text(&a.devices)?)
        .map_err(|e| CliError::validation("invalid_config", format!("{}: {e}", a.devices.display())))?;
    let export = export_geojson(&store, &hierarchy, &mode, &cursor_of(&a.table), &devices)?;
    write_geojson(&a.out, &export).map_err(|e| CliError::io(&a.out, e))?;
    emit_json(
        out,
        &serde_json::json!({
            "features": export.features,
            "missing_coordinates": export.missing_coordinates,
        }),
    )
}

fn cmd_store(c: StoreCommand, out: &mut dyn Write) -> Result<(), CliError> {
    match c {
        StoreCommand::Audit(s) => {
            if !CubeStore::exists(&s.store) {
                return Err(CliError::validation("no_store", format!("no store at {}", s.store.display())));
            }
            let report = audit_dir(&s.store)?;
            emit_json(out, &report)?;
            if report.ok {
                Ok(())
            } else {
                let blocks = report.violated_blocks();
                Err(CliError {
                    kind: ErrorKind::Audit,
                    code: "audit_failed".into(),
                    message: format!("{} block(s) violated", blocks.len()),
                    details: serde_json::json!({ "violated_blocks": blocks }),
                })
            }
        }
        StoreCommand::FailNode { store, node } => {
            let s = open_store(&store.store)?;
            emit_json(out, &s.fail_node(&node)?)
        }
        StoreCommand::RecoverNode { store, node } => {
            let s = open_store(&store.store)?;
            emit_json(out, &s.recover_node(&node)?)
        }
    }
}

/// Assembles the API state described by a serve config.
pub fn serve_state(config: &ServeConfig, base: &Path) -> Result<Arc<ApiState>, CliError> {
    let store_path = config
        .api
        .store
        .as_ref()
        .map(|p| base.join(p))
        .ok_or_else(|| CliError::validation("invalid_config", format!("no store path (set `store` or {ENV_STORE})")))?;
    let store = Arc::new(open_store(&store_path)?);
    let mut state = ApiState::new(store).with_token(config.api.token.clone());
    if let Some(p) = &config.hierarchy {
        state = state.with_hierarchy(read_toml(&base.join(p))?);
    }
    if let Some(p) = &config.devices {
        let p = base.join(p);
        let devices = DeviceMap::from_toml(&read_text(&p)?)
            .map_err(|e| CliError::validation("invalid_config", format!("{}: {e}", p.display())))?;
        state = state.with_devices(devices);
    }
    if let Some(p) = &config.topology {
        state = state.with_mesh(read_json::<Mesh>(&base.join(p))?);
    }
    if let Some(p) = &config.weather {
        state = state.with_exog(read_weather(&base.join(p))?);
    }
    if let Some(p) = &config.modes {
        let modes: ModesFile = read_toml(&base.join(p))?;
        state = state.with_modes(modes.modes);
    }
    if let Some(p) = &config.alerts {
        let alerts: Vec<LeakAlert> = read_rows(&base.join(p))?;
        state.push_leak_alerts(alerts);
    }
    Ok(Arc::new(state))
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let mut config: ServeConfig = read_toml(&a.config)?;
    let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if let Some(s) = a.store {
        config.api.store = Some(std::env::current_dir().map_err(|e| CliError::runtime("io", e.to_string()))?.join(s));
        base
    } else {
        base
    };
    if a.token.is_some() {
        config.api.token = a.token;
    }
    if let Some(port) = a.port {
        config.api.port = port;
    }
    config.api.validate()?;
    let state = serve_state(&config, &base)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::runtime("runtime", e.to_string()))?;
    rt.block_on(api::serve(&config.api, state))?;
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_cli(std::iter::once("heatgrid").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn timestamps_parse_both_ways() {
        assert_eq!(parse_ts("3600"), Ok(3600));
        assert_eq!(parse_ts("1970-01-01T01:00:00Z"), Ok(3600));
        assert!(parse_ts("yesterday").is_err());
    }

    #[test]
    fn bad_arguments_are_validation_failures() {
        assert_eq!(run(&["frobnicate"]).0, 1);
        assert_eq!(run(&["store", "audit", "--store", "/nonexistent/heatgrid"]).0, 1);
        assert_eq!(run(&["--help"]).0, 0);
    }

    #[test]
    fn serve_config_flattens_listener_settings() {
        let c: ServeConfig = toml::from_str("port = 9000\nstore = \"s\"\nhierarchy = \"h.toml\"\n").unwrap();
        assert_eq!(c.api.port, 9000);
        assert_eq!(c.api.store, Some(PathBuf::from("s")));
        assert_eq!(c.hierarchy, Some(PathBuf::from("h.toml")));
    }
}
