#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use heatgrid::aggregate::{rank, KvPair};
use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::ingest::Reading;
use heatgrid::model::{Metric, MetricKey, ObjectId, Timestamp, Window, DAY, HOUR};
use heatgrid::store::{Agg, Cell, CubeStore, FactRecord, Grain, ObjectSel, SliceSpec, StoreConfig};
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn fixture(hours: i64) -> Fixture {
    Fixture::new(FixtureConfig {
        hours,
        ..FixtureConfig::kuznetsk_small()
    })
}

pub fn records(readings: &[Reading]) -> Vec<FactRecord> {
    readings.iter().map(FactRecord::from).collect()
}

/// Fixture readings grouped into consecutive `chunk`-second appends.
pub fn chunks(fx: &Fixture, chunk: i64) -> Vec<Vec<FactRecord>> {
    let mut by_chunk: BTreeMap<i64, Vec<FactRecord>> = BTreeMap::new();
    for r in fx.readings() {
        by_chunk
            .entry((r.ts - fx.config.start_ts) / chunk)
            .or_default()
            .push(FactRecord::from(&r));
    }
    by_chunk.into_values().collect()
}

/// An in-memory store holding the whole fixture, appended one day at a time.
pub fn loaded_store(fx: &Fixture, config: StoreConfig) -> CubeStore {
    let store = CubeStore::in_memory(config).unwrap();
    for part in chunks(fx, DAY) {
        store.append(part).unwrap();
    }
    store
}

pub fn span(fx: &Fixture) -> Window {
    Window::new(fx.config.start_ts, fx.config.end_ts())
}

/// A random but valid slice request over `within`, hour-aligned so grains
/// line up with stored timestamps at least some of the time.
pub fn random_spec(rng: &mut impl Rng, objects: &[ObjectId], within: Window) -> SliceSpec {
    let sel = if rng.random_bool(0.3) {
        ObjectSel::All
    } else {
        let n = rng.random_range(1..=objects.len().min(4));
        ObjectSel::Set(objects.choose_multiple(rng, n).cloned().collect())
    };
    let n_metrics = rng.random_range(1..=2);
    let metrics: BTreeSet<MetricKey> = Metric::ALL
        .choose_multiple(rng, n_metrics)
        .map(|m| MetricKey::Actual(*m))
        .collect();
    let hours = (within.to - within.from) / HOUR;
    let a = rng.random_range(0..hours);
    let len = rng.random_range(1..=(hours - a).min(24 * 10));
    let jitter = if rng.random_bool(0.2) { rng.random_range(1..HOUR) } else { 0 };
    let window = Window::new(within.from + a * HOUR + jitter, within.from + (a + len) * HOUR);
    let grain = *[Grain::Raw, Grain::Hour, Grain::Day, Grain::Month].choose(rng).unwrap();
    let agg = *[Agg::Sum, Agg::Mean, Agg::Min, Agg::Max].choose(rng).unwrap();
    SliceSpec::new(sel, metrics, window, grain, agg)
}

/// Sequential single-pass fold of `(object_id, value)` pairs in
/// `(bucket_ts, object_id)` order; cells without a value emit nothing.
pub fn sequential_fold(cells: &[Cell], reduce: impl Fn(f64, f64) -> f64) -> Vec<KvPair> {
    let mut ordered: Vec<&Cell> = cells.iter().collect();
    ordered.sort_by(|a, b| (a.bucket_ts, &a.object_id).cmp(&(b.bucket_ts, &b.object_id)));
    let mut acc: BTreeMap<String, f64> = BTreeMap::new();
    for c in ordered {
        let Some(v) = c.value else { continue };
        acc.entry(c.object_id.to_string())
            .and_modify(|a| *a = reduce(*a, v))
            .or_insert(v);
    }
    let mut pairs: Vec<KvPair> = acc.into_iter().map(|(key, value)| KvPair { key, value }).collect();
    rank(&mut pairs);
    pairs
}

pub fn bit_identical(a: &[KvPair], b: &[KvPair]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.key == y.key && x.value.to_bits() == y.value.to_bits())
}

pub fn hour(start: Timestamp, h: i64) -> Timestamp {
    start + h * HOUR
}
