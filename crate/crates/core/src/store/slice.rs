use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{MetricKey, ObjectId, Quality, Timestamp, Window, DAY, HOUR};

use super::codec::{Block, Cell};
use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grain {
    Raw,
    Hour,
    Day,
    Month,
}

impl Grain {
    /// Start of the bucket containing `ts`. Months are UTC calendar months.
    pub fn bucket(self, ts: Timestamp) -> Timestamp {
        match self {
            Grain::Raw => ts,
            Grain::Hour => ts - ts.rem_euclid(HOUR),
            Grain::Day => ts - ts.rem_euclid(DAY),
            Grain::Month => {
                let dt = DateTime::<Utc>::from_timestamp(ts, 0).expect("timestamp in range");
                Utc.with_ymd_and_hms(dt.year(), dt.month(), 1, 0, 0, 0)
                    .unwrap()
                    .timestamp()
            }
        }
    }

    /// Fixed step length, where one exists.
    pub fn step_seconds(self) -> Option<i64> {
        match self {
            Grain::Hour => Some(HOUR),
            Grain::Day => Some(DAY),
            Grain::Raw | Grain::Month => None,
        }
    }
}

impl FromStr for Grain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Grain::Raw),
            "hour" => Ok(Grain::Hour),
            "day" => Ok(Grain::Day),
            "month" => Ok(Grain::Month),
            other => Err(format!("unknown grain `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agg {
    Sum,
    Mean,
    Min,
    Max,
}

impl FromStr for Agg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Agg::Sum),
            "mean" => Ok(Agg::Mean),
            "min" => Ok(Agg::Min),
            "max" => Ok(Agg::Max),
            other => Err(format!("unknown aggregate `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectSel {
    All,
    Set(BTreeSet<ObjectId>),
}

impl ObjectSel {
    pub fn matches(&self, id: &ObjectId) -> bool {
        match self {
            ObjectSel::All => true,
            ObjectSel::Set(s) => s.contains(id),
        }
    }

    pub fn overlaps(&self, ids: &BTreeSet<ObjectId>) -> bool {
        match self {
            ObjectSel::All => !ids.is_empty(),
            ObjectSel::Set(s) => s.iter().any(|o| ids.contains(o)),
        }
    }
}

impl fmt::Display for ObjectSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectSel::All => f.write_str("ALL"),
            ObjectSel::Set(s) => {
                let ids: Vec<&str> = s.iter().map(ObjectId::as_str).collect();
                f.write_str(&ids.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceSpec {
    pub objects: ObjectSel,
    pub metrics: BTreeSet<MetricKey>,
    pub window: Window,
    pub grain: Grain,
    /// Ignored for `Grain::Raw`.
    pub agg: Agg,
}

impl SliceSpec {
    pub fn new(
        objects: ObjectSel,
        metrics: impl IntoIterator<Item = MetricKey>,
        window: Window,
        grain: Grain,
        agg: Agg,
    ) -> Self {
        SliceSpec {
            objects,
            metrics: metrics.into_iter().collect(),
            window,
            grain,
            agg,
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if !self.window.is_valid() {
            return Err(StoreError::InvalidSpec(format!(
                "window [{}, {}) is empty",
                self.window.from, self.window.to
            )));
        }
        if self.metrics.is_empty() {
            return Err(StoreError::InvalidSpec("no metrics requested".into()));
        }
        if let ObjectSel::Set(s) = &self.objects {
            if s.is_empty() {
                return Err(StoreError::InvalidSpec("empty object set".into()));
            }
        }
        Ok(())
    }

    /// Cache key: identical to the spec except that `agg` is normalised away
    /// for raw slices.
    pub(crate) fn cache_key(&self) -> SliceSpec {
        let mut key = self.clone();
        if key.grain == Grain::Raw {
            key.agg = Agg::Sum;
        }
        key
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Slice {
    pub spec: SliceSpec,
    pub cells: Vec<Cell>,
    pub blocks: Vec<Block>,
    /// Newest store version among the facts that fed this slice.
    pub version: u64,
}

impl Slice {
    pub fn encoded_len(&self) -> usize {
        self.blocks.iter().map(|b| b.byte_len).sum()
    }

    /// Cell-for-cell bitwise comparison; block ids and checksums included.
    pub fn same_content(&self, other: &Slice) -> bool {
        self.version == other.version
            && self.cells.len() == other.cells.len()
            && self.cells.iter().zip(&other.cells).all(|(a, b)| a.bit_eq(b))
            && self.blocks == other.blocks
    }
}

/// Stored form of one fact (the key lives in the surrounding maps).
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct StoredFact {
    pub value: f64,
    pub quality: Quality,
    pub version: u64,
}

pub(crate) type Streams = BTreeMap<(ObjectId, MetricKey), BTreeMap<Timestamp, StoredFact>>;

/// Aggregates facts into cells. Values are folded in timestamp order within
/// each bucket so results are reproducible bit for bit.
pub(crate) fn compute_cells(streams: &Streams, spec: &SliceSpec) -> (Vec<Cell>, u64) {
    let mut cells = Vec::new();
    let mut version = 0u64;
    let agg = if spec.grain == Grain::Raw {
        Agg::Sum
    } else {
        spec.agg
    };
    for ((object, metric), facts) in streams {
        if !spec.objects.matches(object) || !spec.metrics.contains(metric) {
            continue;
        }
        let mut current: Option<Bucket> = None;
        for (&ts, fact) in facts.range(spec.window.from..spec.window.to) {
            version = version.max(fact.version);
            let b = spec.grain.bucket(ts);
            match &mut current {
                Some(bucket) if bucket.ts == b => bucket.push(fact),
                _ => {
                    if let Some(done) = current.take() {
                        cells.push(done.finish(object, metric));
                    }
                    let mut bucket = Bucket::new(b, agg);
                    bucket.push(fact);
                    current = Some(bucket);
                }
            }
        }
        if let Some(done) = current {
            cells.push(done.finish(object, metric));
        }
    }
    (cells, version)
}

struct Bucket {
    ts: Timestamp,
    agg: Agg,
    count: u64,
    valid: u64,
    acc: f64,
    worst: Option<Quality>,
}

impl Bucket {
    fn new(ts: Timestamp, agg: Agg) -> Self {
        Bucket {
            ts,
            agg,
            count: 0,
            valid: 0,
            acc: 0.0,
            worst: None,
        }
    }

    fn push(&mut self, fact: &StoredFact) {
        self.count += 1;
        if fact.quality == Quality::Missing {
            return;
        }
        self.worst = Some(self.worst.map_or(fact.quality, |w| w.max(fact.quality)));
        if !fact.value.is_finite() {
            return;
        }
        self.valid += 1;
        if self.valid == 1 {
            self.acc = fact.value;
            return;
        }
        self.acc = match self.agg {
            Agg::Sum | Agg::Mean => self.acc + fact.value,
            Agg::Min => self.acc.min(fact.value),
            Agg::Max => self.acc.max(fact.value),
        };
    }

    fn finish(self, object: &ObjectId, metric: &MetricKey) -> Cell {
        let value = match (self.valid, self.agg) {
            (0, _) => None,
            (n, Agg::Mean) => Some(self.acc / n as f64),
            _ => Some(self.acc),
        };
        Cell {
            object_id: object.clone(),
            metric: metric.clone(),
            bucket_ts: self.ts,
            value,
            count: self.count,
            valid: self.valid,
            quality: self.worst.unwrap_or(Quality::Missing),
        }
    }
}
