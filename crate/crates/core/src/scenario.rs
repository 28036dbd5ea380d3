//! End-to-end scenario driver: simulate the collection network over the
//! fixture, ingest what it delivers, analyze, and write reports plus a
//! manifest of counts and artifact digests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregate::{run_job, top_consumers_spec, AggregateError, JobLibrary, KvPair};
use crate::efficiency::efficiency_report;
use crate::fixture::{Fixture, FixtureConfig};
use crate::forecast::{run_forecast, ForecastError, ForecastOutcome, ForecastRequest, ModelSpec};
use crate::geo::{features_from_table, write_geojson};
use crate::hypertable::{
    self, AggMode, ColorRule, ColumnAgg, ColumnSpec, CursorMode, HierarchyMap, HyperTableError, TimeCursor,
    OBJECT_LEVEL,
};
use crate::ingest::{
    consolidate, immerse, normalize, write_ndjson, DeviceMap, IngestError, IntervalPolicy, RangeRules, RawReading,
    Rejected, SourcedReadings, Source, UnitRegistry,
};
use crate::mesh::{build_topology, LeakEvent, Mesh, MeshParams, MeshStats, Simulator, TopologyError, Transport};
use crate::model::{Metric, MetricKey, ObjectId, Timestamp, Window, HOUR};
use crate::store::{CubeStore, Grain, StoreConfig, StoreError};

/// Literal accepted wherever a config table may instead be generated from
/// the fixture.
pub const FROM_FIXTURE: &str = "fixture";

/// A config table given inline or as a path (relative to the scenario file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TableSource<T> {
    Path(String),
    Inline(T),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreSection {
    /// Store directory, relative to the output directory; `None` keeps the
    /// store in memory.
    pub path: Option<PathBuf>,
    pub nodes: usize,
    pub replication: usize,
    pub block_size_limit: usize,
}

impl Default for StoreSection {
    fn default() -> Self {
        let d = StoreConfig::default();
        StoreSection {
            path: Some(PathBuf::from("store")),
            nodes: d.nodes,
            replication: d.replication,
            block_size_limit: d.block_size_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastSection {
    pub metric: Metric,
    pub horizon: usize,
    pub grid: Option<Vec<ModelSpec>>,
    /// Objects to forecast; all fixture objects when empty.
    pub objects: Vec<ObjectId>,
    pub scenario: Option<String>,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            metric: Metric::HeatEnergyKwh,
            horizon: 24,
            grid: None,
            objects: Vec::new(),
            scenario: None,
        }
    }
}

/// A storage-independent mesh node outage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub node: String,
    /// Simulation seconds.
    pub at: i64,
    #[serde(default)]
    pub recover_at: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub fixture: FixtureConfig,
    /// Network knobs; epoch and seed always follow the fixture.
    pub mesh: MeshParams,
    /// Required: `"fixture"`, a path, or an inline table.
    pub devices: Option<TableSource<DeviceMap>>,
    pub units: Option<TableSource<UnitRegistry>>,
    pub hierarchy: Option<TableSource<HierarchyMap>>,
    pub store: StoreSection,
    pub forecast: ForecastSection,
    pub modes: Vec<AggMode>,
    pub top_k: usize,
    pub workers: usize,
    /// Simulated hours handed to ingestion at a time.
    pub chunk_hours: i64,
    pub leaks: Vec<LeakEvent>,
    pub outages: Vec<Outage>,
    /// Also write the full frame trace as NDJSON.
    pub write_trace: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "kuznetsk-small".into(),
            fixture: FixtureConfig::kuznetsk_small(),
            mesh: MeshParams::default(),
            devices: None,
            units: None,
            hierarchy: None,
            store: StoreSection::default(),
            forecast: ForecastSection::default(),
            modes: default_modes(),
            top_k: 5,
            workers: 4,
            chunk_hours: 168,
            leaks: vec![LeakEvent {
                pipeline_id: "main-1".into(),
                true_pos: 450.0,
                onset: 30 * 86_400,
                severity: 0.8,
            }],
            outages: Vec::new(),
            write_trace: false,
        }
    }
}

impl ScenarioConfig {
    /// The stock fixture scenario with every table generated.
    pub fn kuznetsk_small() -> Self {
        ScenarioConfig {
            devices: Some(TableSource::Path(FROM_FIXTURE.into())),
            hierarchy: Some(TableSource::Path(FROM_FIXTURE.into())),
            ..ScenarioConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_toml(&text)?, base))
    }
}

/// Consumption columns at district and network level, and a forecast view.
pub fn default_modes() -> Vec<AggMode> {
    let heat = MetricKey::Actual(Metric::HeatEnergyKwh);
    vec![
        AggMode {
            id: "consumption".into(),
            columns: vec![
                ColumnSpec {
                    key: heat.clone(),
                    agg: ColumnAgg::Sum,
                },
                ColumnSpec {
                    key: MetricKey::Actual(Metric::ElectricKwh),
                    agg: ColumnAgg::Sum,
                },
                ColumnSpec {
                    key: MetricKey::Actual(Metric::SupplyTempC),
                    agg: ColumnAgg::Mean,
                },
                ColumnSpec {
                    key: MetricKey::Actual(Metric::ReturnTempC),
                    agg: ColumnAgg::Mean,
                },
            ],
            levels: vec!["district".into(), "network".into(), OBJECT_LEVEL.into()],
            color_rules: vec![ColorRule {
                column: MetricKey::Actual(Metric::SupplyTempC),
                thresholds: vec![90.0, 105.0],
                classes: vec!["low".into(), "normal".into(), "high".into()],
            }],
            grain: Grain::Day,
        },
        AggMode {
            id: "forecast".into(),
            columns: vec![
                ColumnSpec {
                    key: MetricKey::Forecast(Metric::HeatEnergyKwh),
                    agg: ColumnAgg::Sum,
                },
                ColumnSpec {
                    key: heat,
                    agg: ColumnAgg::Sum,
                },
            ],
            levels: vec!["city".into(), "district".into(), OBJECT_LEVEL.into()],
            color_rules: Vec::new(),
            grain: Grain::Hour,
        },
    ]
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    Config(String),
    #[error("{count} unresolvable device readings ({summary})")]
    UnknownDevice { count: usize, summary: String },
    #[error("unresolvable readings in preflight ({0})")]
    Preflight(String),
    #[error("output directory problem: {0}")]
    Output(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("forecast for {object}: {source}")]
    Forecast { object: ObjectId, source: ForecastError },
    #[error(transparent)]
    HyperTable(#[from] HyperTableError),
    #[error("hyper table `{mode}` failed its consistency check at {paths:?}")]
    Inconsistent { mode: String, paths: Vec<String> },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ScenarioError {
    /// Caller-side problems are validation failures; everything else is a
    /// runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ScenarioError::Config(_)
                | ScenarioError::UnknownDevice { .. }
                | ScenarioError::Preflight(_)
                | ScenarioError::Output(_)
                | ScenarioError::Topology(_)
        )
    }

    pub fn code(&self) -> &'static str {
        match self {
            ScenarioError::Config(_) => "invalid_config",
            ScenarioError::UnknownDevice { .. } => "unknown_device",
            ScenarioError::Preflight(_) => "preflight",
            ScenarioError::Output(_) => "output",
            ScenarioError::Topology(_) => "topology",
            ScenarioError::Store(_) => "store",
            ScenarioError::Ingest(_) => "ingest",
            ScenarioError::Aggregate(_) => "aggregate",
            ScenarioError::Forecast { .. } => "forecast",
            ScenarioError::HyperTable(_) => "hypertable",
            ScenarioError::Inconsistent { .. } => "inconsistent_table",
            ScenarioError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub object_id: ObjectId,
    pub model: String,
    pub holdout_mae: f64,
    pub written: usize,
    pub skipped_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub mode: String,
    pub cursor: TimeCursor,
    pub leaves: usize,
    pub built_at_version: u64,
}

/// Run record. Holds no wall-clock times or absolute paths, so a repeat
/// run with the same config is byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub objects: usize,
    pub hours: i64,
    /// Canonical readings immersed into the store.
    pub readings: usize,
    pub mesh: MeshStats,
    pub buffered_readings: u64,
    pub trace_frames: u64,
    pub trace_sha256: String,
    pub batches: usize,
    pub rejected: usize,
    pub reject_summary: BTreeMap<String, usize>,
    pub store_version: u64,
    pub store_facts: usize,
    pub top_consumers: Vec<KvPair>,
    pub forecasts: Vec<ForecastSummary>,
    pub tables: Vec<TableSummary>,
    pub alerts: usize,
    pub geojson_features: usize,
    pub missing_coordinates: Vec<ObjectId>,
    pub artifacts: Vec<Artifact>,
}

/// Outcome of [`scenario_run`], with the store left open for inspection.
pub struct ScenarioRun {
    pub manifest: Manifest,
    pub store: Arc<CubeStore>,
    pub out_dir: PathBuf,
}

fn resolve<T: serde::de::DeserializeOwned + Clone>(
    src: &TableSource<T>,
    base: &Path,
    generated: impl FnOnce() -> T,
    what: &str,
) -> Result<T, ScenarioError> {
    match src {
        TableSource::Inline(t) => Ok(t.clone()),
        TableSource::Path(p) if p == FROM_FIXTURE => Ok(generated()),
        TableSource::Path(p) => {
            let path = base.join(p);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| ScenarioError::Config(format!("{what} {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| ScenarioError::Config(format!("{what} {}: {e}", path.display())))
        }
    }
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), ScenarioError> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), ScenarioError> {
        let mut text = serde_json::to_vec_pretty(value).expect("serializable");
        text.push(b'\n');
        self.write(name, &text)
    }

    fn toml<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), ScenarioError> {
        let text = toml::to_string_pretty(value).map_err(|e| ScenarioError::Output(e.to_string()))?;
        self.write(name, text.as_bytes())
    }

    fn ndjson<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), ScenarioError> {
        let mut buf = Vec::new();
        write_ndjson(&mut buf, rows)?;
        self.write(name, &buf)
    }

    fn artifacts(&self) -> Result<Vec<Artifact>, ScenarioError> {
        let mut names = self.written.clone();
        names.sort();
        names.dedup();
        names
            .into_iter()
            .map(|file| {
                let bytes = std::fs::read(self.dir.join(&file))?;
                Ok(Artifact {
                    bytes: bytes.len() as u64,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    file,
                })
            })
            .collect()
    }
}

/// One outdoor-temperature sample, the line format of `weather.ndjson`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExogPoint {
    pub ts: Timestamp,
    pub value: f64,
}

/// On-disk form of a set of aggregation modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModesFile {
    pub modes: Vec<AggMode>,
}

#[derive(Serialize)]
struct ServeFile {
    bind: String,
    port: u16,
    store: Option<String>,
    hierarchy: String,
    modes: String,
    devices: String,
    weather: String,
    alerts: String,
    topology: String,
}

/// The collection network for the fixture, with the scenario's knobs.
/// Epoch and seed always come from the fixture.
pub fn scenario_mesh(config: &ScenarioConfig, fixture: &Fixture) -> Result<Mesh, ScenarioError> {
    let mut mesh_config = fixture.mesh_config();
    mesh_config.params = MeshParams {
        epoch: config.fixture.start_ts,
        seed: config.fixture.seed,
        ..config.mesh.clone()
    };
    Ok(build_topology(&mesh_config)?)
}

/// A simulator over the fixture with the configured leaks and outages, and
/// the simulation time by which every generated reading has had its chance
/// to arrive.
pub fn prepare_simulation(
    config: &ScenarioConfig,
    fixture: &Fixture,
    mesh: Mesh,
) -> Result<(Simulator, i64), ScenarioError> {
    let p = mesh.params.clone();
    let mut sim = Simulator::new(mesh, Arc::new(fixture.clone()));
    for leak in &config.leaks {
        sim.inject_leak(leak.clone());
    }
    for o in &config.outages {
        sim.fail_node(&o.node, o.at)
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
        if let Some(r) = o.recover_at {
            sim.recover_node(&o.node, r)
                .map_err(|e| ScenarioError::Config(e.to_string()))?;
        }
    }
    let span = config.fixture.hours * HOUR;
    let drain = span + p.fallback_timeout + 2 * p.wake_period + p.cellular_latency + p.sample_interval;
    Ok((sim, drain))
}

/// Runs the whole pipeline, writing artifacts into `out_dir`. `base` is the
/// directory relative paths in the config are resolved against.
pub fn scenario_run(config: &ScenarioConfig, base: &Path, out_dir: &Path) -> Result<ScenarioRun, ScenarioError> {
    if config.chunk_hours <= 0 || config.workers == 0 || config.fixture.hours <= 0 {
        return Err(ScenarioError::Config("chunk_hours, workers and fixture.hours must be positive".into()));
    }
    let fixture = Fixture::new(config.fixture.clone());
    let devices = match &config.devices {
        Some(src) => resolve(src, base, || fixture.device_map(), "device map")?,
        None => DeviceMap::default(),
    };
    let registry = match &config.units {
        Some(src) => resolve(src, base, UnitRegistry::default, "unit registry")?,
        None => UnitRegistry::default(),
    };
    let hierarchy = match &config.hierarchy {
        Some(src) => resolve(src, base, || fixture.hierarchy(), "hierarchy")?,
        None => fixture.hierarchy(),
    };
    hierarchy.validate()?;
    for m in &config.modes {
        m.validate(&hierarchy)?;
    }
    let rules = RangeRules::default();

    let mesh = scenario_mesh(config, &fixture)?;

    // Every device the network will carry must resolve before anything runs.
    let probe: Vec<RawReading> = mesh
        .end_devices()
        .flat_map(|n| {
            use crate::mesh::SampleSource;
            fixture.sample(&n.node_id, config.fixture.start_ts)
        })
        .collect();
    let checked = normalize(&probe, &registry, &devices, &rules);
    if !checked.rejects.is_empty() {
        let summary = checked.reject_summary();
        let text: Vec<String> = summary.iter().map(|(k, v)| format!("{k}: {v}")).collect();
        let count = checked.rejects.len();
        return Err(if summary.keys().all(|k| *k == "UnknownDevice") {
            ScenarioError::UnknownDevice {
                count,
                summary: text.join(", "),
            }
        } else {
            ScenarioError::Preflight(text.join(", "))
        });
    }

    std::fs::create_dir_all(out_dir)?;
    let store_config = StoreConfig {
        nodes: config.store.nodes,
        replication: config.store.replication,
        block_size_limit: config.store.block_size_limit,
        ..StoreConfig::default()
    };
    let store = Arc::new(match &config.store.path {
        Some(rel) => {
            let dir = out_dir.join(rel);
            if dir.exists() && std::fs::read_dir(&dir)?.next().is_some() {
                return Err(ScenarioError::Output(format!(
                    "store directory {} is not empty",
                    dir.display()
                )));
            }
            CubeStore::open(dir, store_config)?
        }
        None => CubeStore::in_memory(store_config)?,
    });
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        written: Vec::new(),
    };

    // Simulate and ingest chunk by chunk.
    let (mut sim, drain) = prepare_simulation(config, &fixture, mesh)?;
    let policy = IntervalPolicy::default();
    let mut trace_hash = Sha256::new();
    let mut trace_file = if config.write_trace {
        Some(std::io::BufWriter::new(std::fs::File::create(out_dir.join("trace.ndjson"))?))
    } else {
        None
    };
    let mut trace_frames = 0u64;
    let mut rejects: Vec<Rejected> = Vec::new();
    let mut reject_summary: BTreeMap<String, usize> = BTreeMap::new();
    let mut batches = 0usize;
    let mut readings = 0usize;
    let mut t = 0;
    while t < drain {
        let until = (t + config.chunk_hours * HOUR).min(drain);
        let mut mesh_raw = Vec::new();
        let mut cell_raw = Vec::new();
        let mut io_error = None;
        sim.run_until(until, |frame| {
            let mut line = serde_json::to_vec(&frame).expect("frame serializes");
            line.push(b'\n');
            trace_hash.update(&line);
            if let Some(f) = trace_file.as_mut() {
                if let Err(e) = f.write_all(&line) {
                    io_error.get_or_insert(e);
                }
            }
            trace_frames += 1;
            match frame.transport {
                Transport::Mesh => mesh_raw.extend(frame.payload),
                Transport::Cellular => cell_raw.extend(frame.payload),
            }
        });
        if let Some(e) = io_error {
            return Err(e.into());
        }
        let mut inputs = Vec::new();
        for (source, raw) in [(Source::Mesh, mesh_raw), (Source::Cellular, cell_raw)] {
            let n = normalize(&raw, &registry, &devices, &rules);
            rejects.extend(n.reject_rows());
            for (code, count) in n.reject_summary() {
                *reject_summary.entry(code.to_string()).or_default() += count;
            }
            inputs.push(SourcedReadings {
                source,
                readings: n.readings,
            });
        }
        let batch = consolidate(&inputs, &policy);
        if !batch.readings.is_empty() {
            let receipt = immerse(&batch, &store)?;
            if !receipt.duplicate {
                batches += 1;
                readings += batch.readings.len();
            }
        }
        t = until;
    }
    if let Some(mut f) = trace_file.take() {
        f.flush()?;
        out.written.push("trace.ndjson".into());
    }
    let stats = sim.stats();
    if !rejects.is_empty() {
        out.ndjson("rejects.ndjson", &rejects)?;
    }

    // Ranking.
    let full = Window::new(config.fixture.start_ts, config.fixture.end_ts());
    let job = top_consumers_spec(full, config.top_k, "sum", config.workers);
    let top = run_job(&job, &store, &JobLibrary::default())?;
    out.json("top_consumers.json", &top)?;
    out.write("top_consumers.txt", top.to_text().as_bytes())?;

    // Forecasts with outdoor temperature through the horizon.
    let horizon_end = config.fixture.end_ts() + config.forecast.horizon as i64 * HOUR;
    let weather = fixture.weather(config.fixture.start_ts, horizon_end);
    let weather_rows: Vec<ExogPoint> = weather.iter().map(|(&ts, &value)| ExogPoint { ts, value }).collect();
    out.ndjson("weather.ndjson", &weather_rows)?;
    let targets: Vec<ObjectId> = if config.forecast.objects.is_empty() {
        fixture.object_ids()
    } else {
        config.forecast.objects.clone()
    };
    let mut outcomes: Vec<ForecastOutcome> = Vec::new();
    let mut summaries = Vec::new();
    for object in targets {
        let request = ForecastRequest {
            window: Some(full),
            scenario: config.forecast.scenario.clone(),
            grid: config.forecast.grid.clone(),
            ..ForecastRequest::new(object.clone(), config.forecast.metric, config.forecast.horizon)
        };
        let o = run_forecast(&store, &request, Some(&weather))
            .map_err(|source| ScenarioError::Forecast { object: object.clone(), source })?;
        summaries.push(ForecastSummary {
            object_id: object,
            model: o.forecast.model.spec.label(),
            holdout_mae: o.forecast.model.holdout_mae,
            written: o.persisted.written,
            skipped_candidates: o.fit.skipped.len(),
        });
        outcomes.push(o);
    }
    out.json("forecasts.json", &outcomes)?;

    // Hyper tables: archive over the simulated span, forecast modes over
    // the horizon.
    let mut tables = Vec::new();
    let mut geo = None;
    for mode in &config.modes {
        let forecasting = mode.columns.iter().any(|c| c.key.is_forecast());
        let cursor = if forecasting {
            TimeCursor {
                interval: Window::new(config.fixture.end_ts(), horizon_end),
                mode: if config.forecast.scenario.is_some() {
                    CursorMode::Scenario
                } else {
                    CursorMode::Forecast
                },
                scenario: config.forecast.scenario.clone(),
            }
        } else {
            TimeCursor::archive(full)
        };
        let table = hypertable::build(&store, &hierarchy, mode, &cursor)?;
        let bad = table.consistency_violations();
        if !bad.is_empty() {
            return Err(ScenarioError::Inconsistent {
                mode: mode.id.clone(),
                paths: bad,
            });
        }
        let report = table.to_report();
        out.write(&format!("hypertable.{}.txt", mode.id), report.text.as_bytes())?;
        out.write(&format!("hypertable.{}.json", mode.id), report.json.as_bytes())?;
        out.write(&format!("hypertable.{}.csv", mode.id), report.csv.as_bytes())?;
        tables.push(TableSummary {
            mode: mode.id.clone(),
            cursor: cursor.clone(),
            leaves: table.root.leaves().len(),
            built_at_version: table.built_at_version,
        });
        if geo.is_none() && !forecasting {
            geo = Some(features_from_table(&table, &devices.object_locations()));
        }
    }
    let (geojson_features, missing_coordinates) = match geo {
        Some(g) => {
            write_geojson(&out_dir.join("map.geojson"), &g)?;
            out.written.push("map.geojson".into());
            (g.features, g.missing_coordinates)
        }
        None => (0, Vec::new()),
    };

    let alerts = sim.alerts();
    out.ndjson("alerts.ndjson", &alerts)?;
    out.json("efficiency.json", &efficiency_report(&store, Window::new(full.from, horizon_end)))?;
    out.json("topology.json", sim.mesh())?;
    out.toml("devices.toml", &devices)?;
    out.toml("hierarchy.toml", &hierarchy)?;
    out.toml("modes.toml", &ModesFile { modes: config.modes.clone() })?;
    out.toml(
        "serve.toml",
        &ServeFile {
            bind: "127.0.0.1".into(),
            port: 8080,
            store: config
                .store
                .path
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned()),
            hierarchy: "hierarchy.toml".into(),
            modes: "modes.toml".into(),
            devices: "devices.toml".into(),
            weather: "weather.ndjson".into(),
            alerts: "alerts.ndjson".into(),
            topology: "topology.json".into(),
        },
    )?;

    let manifest = Manifest {
        name: config.name.clone(),
        seed: config.fixture.seed,
        objects: fixture.objects.len(),
        hours: config.fixture.hours,
        readings,
        buffered_readings: sim.buffered_readings(),
        mesh: stats,
        trace_frames,
        trace_sha256: hex::encode(trace_hash.finalize()),
        batches,
        rejected: rejects.len(),
        reject_summary,
        store_version: store.version(),
        store_facts: store.fact_count(),
        top_consumers: top.pairs.clone(),
        forecasts: summaries,
        tables,
        alerts: alerts.len(),
        geojson_features,
        missing_coordinates,
        artifacts: out.artifacts()?,
    };
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(ScenarioRun {
        manifest,
        store,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Machine-readable failure record written next to the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub exit_code: i32,
    pub kind: String,
    pub code: String,
    pub message: String,
}

impl FailureReport {
    pub fn of(e: &ScenarioError) -> Self {
        let validation = e.is_validation();
        FailureReport {
            exit_code: if validation { 1 } else { 2 },
            kind: if validation { "validation" } else { "runtime" }.into(),
            code: e.code().into(),
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            fixture: FixtureConfig {
                hours: 24 * 30,
                ..FixtureConfig::kuznetsk_small()
            },
            store: StoreSection {
                path: None,
                ..StoreSection::default()
            },
            leaks: vec![LeakEvent {
                pipeline_id: "main-1".into(),
                true_pos: 450.0,
                onset: 86_400,
                severity: 0.8,
            }],
            ..ScenarioConfig::kuznetsk_small()
        }
    }

    #[test]
    fn small_run_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let a = scenario_run(&cfg, dir.path(), &dir.path().join("a")).unwrap();
        assert_eq!(a.manifest.readings, 12 * 5 * 24 * 30);
        assert_eq!(a.manifest.rejected, 0);
        assert_eq!(a.manifest.alerts, 1);
        assert_eq!(a.manifest.geojson_features, 12);
        let b = scenario_run(&cfg, dir.path(), &dir.path().join("b")).unwrap();
        let ma = std::fs::read(dir.path().join("a/manifest.json")).unwrap();
        let mb = std::fs::read(dir.path().join("b/manifest.json")).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn missing_device_map_is_a_validation_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig {
            devices: None,
            ..small()
        };
        let err = scenario_run(&cfg, dir.path(), dir.path()).err().unwrap();
        assert!(matches!(err, ScenarioError::UnknownDevice { count: 60, .. }), "{err}");
        assert_eq!(FailureReport::of(&err).exit_code, 1);
    }
}
