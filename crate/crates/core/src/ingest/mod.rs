//! Sensor data flow: raw device readings are normalised into canonical
//! units, consolidated across delivery paths, and immersed into the store.

pub mod units;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Metric, MetricKey, ObjectId, Quality, Timestamp, HOUR};
use crate::store::{AppendReceipt, CubeStore, FactRecord, StoreError};

pub use self::units::{DeviceEntry, DeviceMap, RangeRules, UnitDef, UnitRegistry};

/// A reading as reported by a device, before any interpretation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawReading {
    pub device_id: String,
    pub metric: String,
    pub ts: Timestamp,
    #[serde(with = "crate::model::nan_as_null")]
    pub value: f64,
    pub unit: String,
}

/// A canonical reading. `value` is finite unless `quality` is `Suspect`
/// (a device sent a non-finite sentinel) or `Missing` (gap placeholder).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub object_id: ObjectId,
    pub metric: Metric,
    pub ts: Timestamp,
    #[serde(with = "crate::model::nan_as_null")]
    pub value: f64,
    pub quality: Quality,
}

impl Reading {
    fn key(&self) -> (&ObjectId, Metric, Timestamp) {
        (&self.object_id, self.metric, self.ts)
    }
}

/// Delivery path, in priority order: when the same reading arrives twice the
/// earlier variant wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Mesh,
    Cellular,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub readings: Vec<Reading>,
    /// Highest-priority source that contributed.
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum RecordError {
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("unit `{unit}` cannot express {metric}")]
    UnitMismatch { unit: String, metric: String },
    #[error("negative timestamp {0}")]
    NegativeTimestamp(Timestamp),
}

impl RecordError {
    pub fn code(&self) -> &'static str {
        match self {
            RecordError::UnknownUnit(_) => "UnknownUnit",
            RecordError::UnknownDevice(_) => "UnknownDevice",
            RecordError::UnknownMetric(_) => "UnknownMetric",
            RecordError::UnitMismatch { .. } => "UnitMismatch",
            RecordError::NegativeTimestamp(_) => "NegativeTimestamp",
        }
    }
}

/// A raw record that could not be normalised, kept for the reject file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    #[serde(flatten)]
    pub record: RawReading,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Normalized {
    pub readings: Vec<Reading>,
    pub rejects: Vec<(RawReading, RecordError)>,
}

impl Normalized {
    pub fn reject_rows(&self) -> Vec<Rejected> {
        self.rejects
            .iter()
            .map(|(record, e)| Rejected {
                record: record.clone(),
                error: format!("{}: {e}", e.code()),
            })
            .collect()
    }

    /// Counts of rejects per error code.
    pub fn reject_summary(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for (_, e) in &self.rejects {
            *out.entry(e.code()).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn normalize_one(
    raw: &RawReading,
    registry: &UnitRegistry,
    devices: &DeviceMap,
    rules: &RangeRules,
) -> Result<Reading, RecordError> {
    let device = devices
        .get(&raw.device_id)
        .ok_or_else(|| RecordError::UnknownDevice(raw.device_id.clone()))?;
    let metric =
        Metric::from_code(&raw.metric).ok_or_else(|| RecordError::UnknownMetric(raw.metric.clone()))?;
    let unit = registry
        .get(&raw.unit)
        .ok_or_else(|| RecordError::UnknownUnit(raw.unit.clone()))?;
    if unit.dimension != metric.dimension() {
        return Err(RecordError::UnitMismatch {
            unit: raw.unit.clone(),
            metric: metric.code().to_string(),
        });
    }
    if raw.ts < 0 {
        return Err(RecordError::NegativeTimestamp(raw.ts));
    }
    let value = unit.to_canonical(raw.value);
    let quality = if value.is_finite() && rules.plausible(metric, value) {
        Quality::Good
    } else {
        Quality::Suspect
    };
    Ok(Reading {
        object_id: device.object_id.clone(),
        metric,
        ts: raw.ts,
        value: if value.is_finite() { value } else { f64::NAN },
        quality,
    })
}

/// Converts raw readings into canonical ones. Records that cannot be
/// interpreted are quarantined with their error; the rest is processed.
/// Implausible or non-finite values are kept and flagged `Suspect`.
pub fn normalize(
    raw: &[RawReading],
    registry: &UnitRegistry,
    devices: &DeviceMap,
    rules: &RangeRules,
) -> Normalized {
    let mut out = Normalized::default();
    for r in raw {
        match normalize_one(r, registry, devices, rules) {
            Ok(reading) => out.readings.push(reading),
            Err(e) => out.rejects.push((r.clone(), e)),
        }
    }
    out.readings
        .sort_by(|a, b| a.key().cmp(&b.key()).then(a.value.total_cmp(&b.value)));
    out
}

/// Expected sampling interval per metric; gap detection keys off it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalPolicy {
    pub default_seconds: i64,
    #[serde(default)]
    pub per_metric: BTreeMap<Metric, i64>,
}

impl Default for IntervalPolicy {
    fn default() -> Self {
        IntervalPolicy {
            default_seconds: HOUR,
            per_metric: BTreeMap::new(),
        }
    }
}

impl IntervalPolicy {
    pub fn interval(&self, metric: Metric) -> i64 {
        self.per_metric
            .get(&metric)
            .copied()
            .unwrap_or(self.default_seconds)
    }
}

/// Normalised readings from one delivery.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcedReadings {
    pub source: Source,
    pub readings: Vec<Reading>,
}

/// Merges deliveries into one batch. Duplicate keys keep the copy from the
/// highest-priority source, then the earliest input. Gaps longer than one
/// expected interval get `Missing` placeholders on the interval grid.
pub fn consolidate(inputs: &[SourcedReadings], intervals: &IntervalPolicy) -> Batch {
    let mut best: BTreeMap<(ObjectId, Metric, Timestamp), ((Source, usize), &Reading)> = BTreeMap::new();
    for (order, input) in inputs.iter().enumerate() {
        for r in &input.readings {
            let rank = (input.source, order);
            best.entry((r.object_id.clone(), r.metric, r.ts))
                .and_modify(|cur| {
                    if rank < cur.0 {
                        *cur = (rank, r);
                    }
                })
                .or_insert((rank, r));
        }
    }

    let mut readings: Vec<Reading> = Vec::with_capacity(best.len());
    let mut prev: Option<(ObjectId, Metric, Timestamp)> = None;
    for ((object, metric, ts), (_, r)) in best {
        if let Some((po, pm, pts)) = &prev {
            if *po == object && *pm == metric {
                let step = intervals.interval(metric);
                let mut t = pts + step;
                while t < ts {
                    readings.push(Reading {
                        object_id: object.clone(),
                        metric,
                        ts: t,
                        value: f64::NAN,
                        quality: Quality::Missing,
                    });
                    t += step;
                }
            }
        }
        prev = Some((object.clone(), metric, ts));
        readings.push(r.clone());
    }

    let source = inputs
        .iter()
        .filter(|i| !i.readings.is_empty())
        .map(|i| i.source)
        .min()
        .unwrap_or(Source::File);
    Batch {
        batch_id: batch_id_of(&readings),
        readings,
        source,
    }
}

/// Content-derived batch id: identical readings always give the same id.
pub fn batch_id_of(readings: &[Reading]) -> String {
    let mut h = Sha256::new();
    for r in readings {
        h.update(r.object_id.as_str().as_bytes());
        h.update([0]);
        h.update(r.metric.code().as_bytes());
        h.update(r.ts.to_le_bytes());
        h.update(r.value.to_bits().to_le_bytes());
        h.update([r.quality.code()]);
    }
    format!("b{}", hex::encode(&h.finalize()[..12]))
}

impl From<&Reading> for FactRecord {
    fn from(r: &Reading) -> Self {
        FactRecord {
            object_id: r.object_id.clone(),
            metric: MetricKey::Actual(r.metric),
            ts: r.ts,
            value: r.value,
            quality: r.quality,
        }
    }
}

/// Appends a consolidated batch atomically. Immersing a batch id a second
/// time is a no-op whose receipt has `duplicate = true`.
pub fn immerse(batch: &Batch, store: &CubeStore) -> Result<AppendReceipt, IngestError> {
    if batch.readings.is_empty() {
        return Err(IngestError::EmptyBatch);
    }
    let records = batch.readings.iter().map(FactRecord::from).collect();
    Ok(store.append_batch(&batch.batch_id, records)?)
}

/// Reads one `RawReading` per line; blank lines are skipped.
pub fn read_ndjson<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IngestError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_ndjson<T: Serialize>(mut writer: impl Write, rows: &[T]) -> std::io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut writer, row)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
