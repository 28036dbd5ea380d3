//! Deterministic in-process map-reduce over store slices.
//!
//! The master splits the slice into contiguous chunks, one per worker; each
//! worker maps its chunk independently; pairs are grouped by key; groups are
//! dealt out to workers and folded; the master assembles the ranked list.
//! Each group is folded in (bucket, object, input position) order, so the
//! floating-point result does not depend on the number of workers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Metric, MetricKey, ObjectId, Timestamp, Window};
use crate::store::{Agg, Cell, CubeStore, Grain, ObjectSel, SliceSpec, StoreError};

pub type MapFn = Arc<dyn Fn(&Cell) -> Vec<(String, f64)> + Send + Sync>;
pub type ReduceFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Triples tried when a reduce function is registered.
pub const REDUCE_CHECK_TRIALS: usize = 1000;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("a function named `{0}` is already registered")]
    DuplicateName(String),
    #[error("reduce `{name}` is not associative and commutative: f({a}, {b}, {c}) differs by grouping or order")]
    NonAssociativeReduce { name: String, a: f64, b: f64, c: f64 },
    #[error("no map or reduce function named `{0}`")]
    UnknownFunction(String),
    #[error("invalid job: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub input: SliceSpec,
    pub map_fn: String,
    pub reduce_fn: String,
    pub workers: usize,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvPair {
    pub key: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggResult {
    /// Sorted by value descending, key ascending on ties.
    pub pairs: Vec<KvPair>,
    pub job_id: String,
    pub input_version: u64,
    /// The input slice held no cells.
    pub empty_input: bool,
    /// Distinct keys before truncation.
    pub total_keys: usize,
}

impl AggResult {
    /// Aligned two-column text.
    pub fn to_text(&self) -> String {
        let width = self.pairs.iter().map(|p| p.key.len()).max().unwrap_or(3).max(3);
        let mut out = format!("{:<width$}  value\n", "key");
        for p in &self.pairs {
            let _ = writeln!(out, "{:<width$}  {}", p.key, p.value);
        }
        out
    }
}

/// Named map and reduce functions available to jobs.
#[derive(Clone)]
pub struct JobLibrary {
    maps: BTreeMap<String, MapFn>,
    reduces: BTreeMap<String, ReduceFn>,
}

impl Default for JobLibrary {
    fn default() -> Self {
        let mut lib = JobLibrary {
            maps: BTreeMap::new(),
            reduces: BTreeMap::new(),
        };
        lib.register_map("object_value", |c: &Cell| {
            c.value.map(|v| (c.object_id.to_string(), v)).into_iter().collect()
        })
        .expect("fresh library");
        lib.register_map("object_metric", |c: &Cell| {
            c.value
                .map(|v| (format!("{}/{}", c.object_id, c.metric), v))
                .into_iter()
                .collect()
        })
        .expect("fresh library");
        lib.register_map("bucket", |c: &Cell| {
            c.value.map(|v| (c.bucket_ts.to_string(), v)).into_iter().collect()
        })
        .expect("fresh library");
        lib.register_reduce("sum", |a, b| a + b).expect("sum is lawful on integers");
        lib.register_reduce("max", f64::max).expect("max is lawful");
        lib.register_reduce("min", f64::min).expect("min is lawful");
        lib
    }
}

impl JobLibrary {
    pub fn register_map(
        &mut self,
        name: &str,
        f: impl Fn(&Cell) -> Vec<(String, f64)> + Send + Sync + 'static,
    ) -> Result<(), AggregateError> {
        if self.maps.contains_key(name) {
            return Err(AggregateError::DuplicateName(name.to_string()));
        }
        self.maps.insert(name.to_string(), Arc::new(f));
        Ok(())
    }

    /// Registers a fold after checking associativity and commutativity on
    /// seeded integer-valued triples (integers keep float addition exact).
    pub fn register_reduce(
        &mut self,
        name: &str,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<(), AggregateError> {
        if self.reduces.contains_key(name) {
            return Err(AggregateError::DuplicateName(name.to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..REDUCE_CHECK_TRIALS {
            let [a, b, c] = [0; 3].map(|_| rng.random_range(-1000i32..=1000) as f64);
            let assoc = f(f(a, b), c).to_bits() == f(a, f(b, c)).to_bits();
            let comm = f(a, b).to_bits() == f(b, a).to_bits();
            if !assoc || !comm {
                return Err(AggregateError::NonAssociativeReduce {
                    name: name.to_string(),
                    a,
                    b,
                    c,
                });
            }
        }
        self.reduces.insert(name.to_string(), Arc::new(f));
        Ok(())
    }

    pub fn map_names(&self) -> Vec<String> {
        self.maps.keys().cloned().collect()
    }

    pub fn reduce_names(&self) -> Vec<String> {
        self.reduces.keys().cloned().collect()
    }

    pub fn map(&self, name: &str) -> Result<&MapFn, AggregateError> {
        self.maps
            .get(name)
            .ok_or_else(|| AggregateError::UnknownFunction(name.to_string()))
    }

    pub fn reduce(&self, name: &str) -> Result<&ReduceFn, AggregateError> {
        self.reduces
            .get(name)
            .ok_or_else(|| AggregateError::UnknownFunction(name.to_string()))
    }
}

/// Fold position of one emitted pair.
type Order = (Timestamp, ObjectId, usize, usize);

pub fn job_id(spec: &JobSpec) -> String {
    let identity = serde_json::json!({
        "input": spec.input,
        "map": spec.map_fn,
        "reduce": spec.reduce_fn,
        "top_k": spec.top_k,
    });
    let digest = Sha256::digest(identity.to_string().as_bytes());
    format!("job-{}", hex::encode(&digest[..8]))
}

fn validate(spec: &JobSpec) -> Result<(), AggregateError> {
    if spec.workers == 0 {
        return Err(AggregateError::InvalidSpec("workers must be at least 1".into()));
    }
    if spec.top_k == Some(0) {
        return Err(AggregateError::InvalidSpec("top_k must be positive".into()));
    }
    spec.input.validate()?;
    Ok(())
}

/// Runs the job over cells already fetched. Exposed so the engine can be
/// exercised on arbitrary inputs.
pub fn run_on_cells(
    cells: &[Cell],
    map: &MapFn,
    reduce: &ReduceFn,
    workers: usize,
) -> Vec<KvPair> {
    let workers = workers.max(1);
    let chunk = cells.len().div_ceil(workers).max(1);

    // Map: each worker handles one contiguous chunk.
    let mapped: Vec<Vec<(String, Order, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = cells
            .chunks(chunk)
            .enumerate()
            .map(|(w, part)| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for (j, cell) in part.iter().enumerate() {
                        for (e, (key, value)) in map(cell).into_iter().enumerate() {
                            out.push((key, (cell.bucket_ts, cell.object_id.clone(), w * chunk + j, e), value));
                        }
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("map worker panicked")).collect()
    });

    // Shuffle: group by key.
    let mut groups: BTreeMap<String, Vec<(Order, f64)>> = BTreeMap::new();
    for part in mapped {
        for (key, order, value) in part {
            groups.entry(key).or_default().push((order, value));
        }
    }

    // Reduce: groups dealt round-robin to workers.
    let groups: Vec<(String, Vec<(Order, f64)>)> = groups.into_iter().collect();
    let reduced: Vec<Vec<KvPair>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let groups = &groups;
                s.spawn(move || {
                    groups
                        .iter()
                        .skip(w)
                        .step_by(workers)
                        .filter(|(_, vals)| !vals.is_empty())
                        .map(|(key, vals)| {
                            let mut vals: Vec<&(Order, f64)> = vals.iter().collect();
                            vals.sort_by(|a, b| a.0.cmp(&b.0));
                            let mut acc = vals[0].1;
                            for (_, v) in &vals[1..] {
                                acc = reduce(acc, *v);
                            }
                            KvPair { key: key.clone(), value: acc }
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("reduce worker panicked")).collect()
    });

    let mut pairs: Vec<KvPair> = reduced.into_iter().flatten().collect();
    rank(&mut pairs);
    pairs
}

/// Value descending, key ascending on ties.
pub fn rank(pairs: &mut [KvPair]) {
    pairs.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| a.key.cmp(&b.key)));
}

pub fn run_job(spec: &JobSpec, store: &CubeStore, library: &JobLibrary) -> Result<AggResult, AggregateError> {
    validate(spec)?;
    let map = library.map(&spec.map_fn)?;
    let reduce = library.reduce(&spec.reduce_fn)?;
    let slice = store.query_slice(&spec.input)?;
    let mut pairs = run_on_cells(&slice.cells, map, reduce, spec.workers);
    let total_keys = pairs.len();
    if let Some(k) = spec.top_k {
        pairs.truncate(k);
    }
    Ok(AggResult {
        pairs,
        job_id: job_id(spec),
        input_version: slice.version,
        empty_input: slice.cells.is_empty(),
        total_keys,
    })
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// The canonical consumption ranking: per-object heat energy over the window.
pub fn top_consumers_spec(window: Window, k: usize, reduce: &str, workers: usize) -> JobSpec {
    JobSpec {
        input: SliceSpec::new(
            ObjectSel::All,
            [MetricKey::Actual(Metric::HeatEnergyKwh)],
            window,
            Grain::Raw,
            Agg::Sum,
        ),
        map_fn: "object_value".into(),
        reduce_fn: reduce.into(),
        workers,
        top_k: Some(k),
    }
}

pub fn top_consumers(store: &CubeStore, window: Window, k: usize) -> Result<AggResult, AggregateError> {
    run_job(
        &top_consumers_spec(window, k, "sum", default_workers()),
        store,
        &JobLibrary::default(),
    )
}

/// Keys emitted by `map` over `cells`, for completeness checks.
pub fn emitted_keys(cells: &[Cell], map: &MapFn) -> BTreeSet<String> {
    cells.iter().flat_map(|c| map(c)).map(|(k, _)| k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Quality, HOUR};
    use crate::store::{FactRecord, StoreConfig};
    use proptest::prelude::*;

    fn fact(obj: &str, ts: i64, value: f64) -> FactRecord {
        FactRecord {
            object_id: ObjectId::new(obj),
            metric: Metric::HeatEnergyKwh.into(),
            ts,
            value,
            quality: Quality::Good,
        }
    }

    fn cell(obj: &str, ts: i64, value: f64) -> Cell {
        Cell {
            object_id: ObjectId::new(obj),
            metric: Metric::HeatEnergyKwh.into(),
            bucket_ts: ts,
            value: Some(value),
            count: 1,
            valid: 1,
            quality: Quality::Good,
        }
    }

    #[test]
    fn worked_example_top_one() {
        let store = CubeStore::in_memory(StoreConfig::default()).unwrap();
        store
            .append(vec![fact("A", 0, 10.0), fact("B", 0, 30.0), fact("C", 0, 20.0)])
            .unwrap();
        let r = top_consumers(&store, Window::new(0, HOUR), 1).unwrap();
        assert_eq!(r.pairs, vec![KvPair { key: "B".into(), value: 30.0 }]);
        let all = top_consumers(&store, Window::new(0, HOUR), 10).unwrap();
        assert_eq!(all.pairs.len(), 3);
        assert_eq!(all.total_keys, 3);
    }

    #[test]
    fn empty_slice_flags_metadata() {
        let store = CubeStore::in_memory(StoreConfig::default()).unwrap();
        let r = top_consumers(&store, Window::new(0, HOUR), 3).unwrap();
        assert!(r.pairs.is_empty() && r.empty_input);
    }

    #[test]
    fn ties_order_by_key() {
        let store = CubeStore::in_memory(StoreConfig::default()).unwrap();
        store.append(vec![fact("Y", 0, 5.0), fact("X", 0, 5.0)]).unwrap();
        let r = top_consumers(&store, Window::new(0, HOUR), 2).unwrap();
        assert_eq!(r.pairs[0].key, "X");
    }

    #[test]
    fn registration_rules() {
        let mut lib = JobLibrary::default();
        assert!(matches!(lib.register_reduce("sum", |a, b| a + b), Err(AggregateError::DuplicateName(_))));
        assert!(matches!(
            lib.register_reduce("sub", |a, b| a - b),
            Err(AggregateError::NonAssociativeReduce { .. })
        ));
        assert!(matches!(
            lib.register_reduce("avg2", |a, b| (a + b) / 2.0),
            Err(AggregateError::NonAssociativeReduce { .. })
        ));
        lib.register_reduce("abs_max", |a: f64, b: f64| a.abs().max(b.abs())).unwrap();
    }

    #[test]
    fn max_reduce_gives_per_object_peak() {
        let store = CubeStore::in_memory(StoreConfig::default()).unwrap();
        store
            .append(vec![fact("A", 0, 1.0), fact("A", HOUR, 7.0), fact("B", 0, 3.0), fact("B", HOUR, 2.0)])
            .unwrap();
        let spec = top_consumers_spec(Window::new(0, 2 * HOUR), 5, "max", 2);
        let r = run_job(&spec, &store, &JobLibrary::default()).unwrap();
        assert_eq!(
            r.pairs,
            vec![KvPair { key: "A".into(), value: 7.0 }, KvPair { key: "B".into(), value: 3.0 }]
        );
    }

    proptest! {
        #[test]
        fn partition_invariance_and_sequential_oracle(
            raw in proptest::collection::vec((0u8..6, 0i64..50, -1.0e3f64..1.0e3), 0..300),
            workers in 1usize..9,
        ) {
            let mut cells: Vec<Cell> = raw
                .iter()
                .map(|(o, t, v)| cell(&format!("o{o}"), *t, *v))
                .collect();
            cells.sort_by(|a, b| (&a.object_id, a.bucket_ts).cmp(&(&b.object_id, b.bucket_ts)));
            let lib = JobLibrary::default();
            let map = lib.map("object_value").unwrap();
            for reduce in ["sum", "max", "min"] {
                let f = lib.reduce(reduce).unwrap();
                let got = run_on_cells(&cells, map, f, workers);
                prop_assert_eq!(&got, &run_on_cells(&cells, map, f, 1));

                // Sequential oracle: walk cells in (bucket, object, position) order.
                let mut order: Vec<usize> = (0..cells.len()).collect();
                order.sort_by(|&a, &b| {
                    (cells[a].bucket_ts, &cells[a].object_id, a).cmp(&(cells[b].bucket_ts, &cells[b].object_id, b))
                });
                let mut acc: BTreeMap<String, f64> = BTreeMap::new();
                for i in order {
                    let c = &cells[i];
                    let v = c.value.unwrap();
                    acc.entry(c.object_id.to_string())
                        .and_modify(|a| *a = f(*a, v))
                        .or_insert(v);
                }
                let mut oracle: Vec<KvPair> = acc.into_iter().map(|(key, value)| KvPair { key, value }).collect();
                rank(&mut oracle);
                prop_assert_eq!(got.len(), emitted_keys(&cells, map).len());
                for (g, o) in got.iter().zip(&oracle) {
                    prop_assert_eq!(&g.key, &o.key);
                    prop_assert_eq!(g.value.to_bits(), o.value.to_bits());
                }
            }
        }
    }
}
