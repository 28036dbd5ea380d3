mod common;

use std::collections::{BTreeMap, BTreeSet};

use heatgrid::model::{Metric, MetricKey, ObjectId, Quality, Window, DAY, HOUR};
use heatgrid::store::cluster::ViolationKind;
use heatgrid::store::{audit_dir, Agg, Cell, CubeStore, FactRecord, Grain, ObjectSel, SliceSpec, StoreConfig, StoreError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

const T0: i64 = 1_700_000_000 - 1_700_000_000 % DAY;

fn fact(obj: &str, metric: Metric, ts: i64, value: f64) -> FactRecord {
    FactRecord {
        object_id: ObjectId::new(obj),
        metric: MetricKey::Actual(metric),
        ts,
        value,
        quality: Quality::Good,
    }
}

fn heat_spec(objects: ObjectSel, window: Window, grain: Grain, agg: Agg) -> SliceSpec {
    SliceSpec::new(objects, [MetricKey::Actual(Metric::HeatEnergyKwh)], window, grain, agg)
}

fn store() -> CubeStore {
    CubeStore::in_memory(StoreConfig::default()).unwrap()
}

/// Bucket aggregation recomputed from raw fact rows.
fn naive_cells(store: &CubeStore, spec: &SliceSpec) -> Vec<Cell> {
    let rows = store.facts(&spec.objects, &spec.metrics, spec.window);
    let mut buckets: BTreeMap<(ObjectId, MetricKey, i64), Vec<&FactRecord>> = BTreeMap::new();
    for r in &rows {
        buckets
            .entry((r.object_id.clone(), r.metric.clone(), spec.grain.bucket(r.ts)))
            .or_default()
            .push(r);
    }
    let agg = if spec.grain == Grain::Raw { Agg::Sum } else { spec.agg };
    buckets
        .into_iter()
        .map(|((object_id, metric, bucket_ts), mut facts)| {
            facts.sort_by_key(|f| f.ts);
            let present: Vec<&&FactRecord> = facts.iter().filter(|f| f.quality != Quality::Missing).collect();
            let usable: Vec<f64> = present.iter().map(|f| f.value).filter(|v| v.is_finite()).collect();
            let value = usable.split_first().map(|(first, rest)| {
                let folded = rest.iter().fold(*first, |a, &v| match agg {
                    Agg::Sum | Agg::Mean => a + v,
                    Agg::Min => a.min(v),
                    Agg::Max => a.max(v),
                });
                if agg == Agg::Mean {
                    folded / usable.len() as f64
                } else {
                    folded
                }
            });
            Cell {
                object_id,
                metric,
                bucket_ts,
                value,
                count: facts.len() as u64,
                valid: usable.len() as u64,
                quality: present.iter().map(|f| f.quality).max().unwrap_or(Quality::Missing),
            }
        })
        .collect()
}

#[test]
fn month_sum_over_fixture_matches_raw_rows() {
    let fx = fixture(24 * 70);
    let store = loaded_store(&fx, StoreConfig::default());
    for agg in [Agg::Sum, Agg::Mean, Agg::Min, Agg::Max] {
        let spec = heat_spec(ObjectSel::All, span(&fx), Grain::Month, agg);
        let got = store.query_slice(&spec).unwrap().cells;
        let want = naive_cells(&store, &spec);
        assert_eq!(got.len(), want.len());
        assert!(got.iter().zip(&want).all(|(a, b)| a.bit_eq(b)), "{agg:?}");
    }
}

#[test]
fn read_your_writes_through_the_cache() {
    let s = store();
    let spec = heat_spec(ObjectSel::All, Window::new(T0, T0 + DAY), Grain::Day, Agg::Sum);
    s.append(vec![fact("a", Metric::HeatEnergyKwh, T0, 1.0)]).unwrap();
    assert_eq!(s.query_slice(&spec).unwrap().cells[0].value, Some(1.0));
    let receipt = s.append(vec![fact("a", Metric::HeatEnergyKwh, T0 + HOUR, 2.0)]).unwrap();
    assert_eq!(receipt.cache_invalidated, 1);
    let after = s.query_slice(&spec).unwrap();
    assert_eq!(after.cells[0].value, Some(3.0));
    assert_eq!(after.version, receipt.store_version);
}

#[test]
fn conflicting_batch_is_rejected_whole() {
    let s = store();
    s.append(vec![fact("a", Metric::HeatEnergyKwh, T0, 1.0)]).unwrap();
    let version = s.version();
    let batch = vec![
        fact("b", Metric::HeatEnergyKwh, T0, 5.0),
        fact("a", Metric::HeatEnergyKwh, T0 + HOUR, 5.0),
        fact("a", Metric::HeatEnergyKwh, T0, 1.5),
    ];
    let err = s.append(batch).unwrap_err();
    assert!(matches!(err, StoreError::KeyConflict { ts, .. } if ts == T0));
    assert_eq!(s.version(), version);
    assert_eq!(s.fact_count(), 1);
    assert!(s.block_catalog().iter().all(|b| b.version <= version));

    // A conflict inside one batch is caught too.
    let err = s
        .append(vec![fact("c", Metric::FlowM3h, T0, 1.0), fact("c", Metric::FlowM3h, T0, 2.0)])
        .unwrap_err();
    assert!(matches!(err, StoreError::KeyConflict { .. }));
    assert_eq!(s.fact_count(), 1);
}

#[test]
fn identical_rewrite_is_a_no_op() {
    let s = store();
    let rows = vec![fact("a", Metric::HeatEnergyKwh, T0, 1.0), fact("a", Metric::HeatEnergyKwh, T0 + HOUR, 2.0)];
    s.append(rows.clone()).unwrap();
    let blocks = s.block_catalog().len();
    let r = s.append(rows).unwrap();
    assert_eq!(r.records, 0);
    assert!(r.blocks.is_empty());
    assert_eq!(s.block_catalog().len(), blocks);
    assert_eq!(s.fact_count(), 2);
}

#[test]
fn named_batches_apply_once() {
    let s = store();
    let rows = vec![fact("a", Metric::HeatEnergyKwh, T0, 1.0)];
    assert!(!s.append_batch("b1", rows.clone()).unwrap().duplicate);
    assert!(s.append_batch("b1", rows).unwrap().duplicate);
    assert!(s.has_batch("b1"));
    assert_eq!(s.fact_count(), 1);
}

#[test]
fn versions_increase_with_every_append() {
    let s = store();
    let mut last = s.version();
    for i in 0..20 {
        let r = s.append(vec![fact("a", Metric::FlowM3h, T0 + i * HOUR, i as f64)]).unwrap();
        assert!(r.store_version > last);
        last = r.store_version;
        assert_eq!(s.version(), last);
        assert_eq!(r.high_water[&ObjectId::new("a")], T0 + i * HOUR);
    }
}

#[test]
fn invalidation_only_drops_overlapping_slices() {
    let s = store();
    for obj in ["a", "b"] {
        s.append((0..48).map(|h| fact(obj, Metric::HeatEnergyKwh, T0 + h * HOUR, 1.0)).collect())
            .unwrap();
    }
    let a_day1 = heat_spec(ObjectSel::Set(["a".into()].into()), Window::new(T0, T0 + DAY), Grain::Hour, Agg::Sum);
    let b_day1 = heat_spec(ObjectSel::Set(["b".into()].into()), Window::new(T0, T0 + DAY), Grain::Hour, Agg::Sum);
    let a_day2 = heat_spec(ObjectSel::Set(["a".into()].into()), Window::new(T0 + DAY, T0 + 2 * DAY), Grain::Hour, Agg::Sum);
    let all = heat_spec(ObjectSel::All, Window::new(T0, T0 + 3 * DAY), Grain::Day, Agg::Sum);
    for spec in [&a_day1, &b_day1, &a_day2, &all] {
        s.query_slice(spec).unwrap();
    }
    assert_eq!(s.cache_stats().entries, 4);
    // New fact for `a` on day 2: drops a_day2 and the all-objects slice.
    let r = s.append(vec![fact("a", Metric::FlowM3h, T0 + DAY + 30 * 60, 9.0)]).unwrap();
    assert_eq!(r.cache_invalidated, 2);
    let left = s.cached_specs();
    assert_eq!(left.len(), 2);
    assert!(left.contains(&a_day1) && left.contains(&b_day1));
}

#[test]
fn cache_hits_are_counted_and_clearable() {
    let s = store();
    s.append(vec![fact("a", Metric::HeatEnergyKwh, T0, 1.0)]).unwrap();
    let spec = heat_spec(ObjectSel::All, Window::new(T0, T0 + DAY), Grain::Raw, Agg::Sum);
    s.query_slice(&spec).unwrap();
    s.query_slice(&spec).unwrap();
    let st = s.cache_stats();
    assert_eq!((st.hits, st.misses, st.entries), (1, 1, 1));
    s.clear_cache();
    assert_eq!(s.cache_stats().entries, 0);
}

#[test]
fn invalid_specs_are_refused() {
    let s = store();
    let empty = heat_spec(ObjectSel::All, Window::new(T0, T0), Grain::Hour, Agg::Sum);
    assert!(matches!(s.query_slice(&empty), Err(StoreError::InvalidSpec(_))));
    let no_metrics = SliceSpec::new(ObjectSel::All, [], Window::new(T0, T0 + 1), Grain::Hour, Agg::Sum);
    assert!(matches!(s.query_slice(&no_metrics), Err(StoreError::InvalidSpec(_))));
}

#[test]
fn bad_replication_config_is_refused() {
    for (nodes, replication) in [(3, 0), (2, 3)] {
        let r = CubeStore::in_memory(StoreConfig {
            nodes,
            replication,
            ..StoreConfig::default()
        });
        assert!(matches!(r, Err(StoreError::Config(_))));
    }
}

#[test]
fn three_replicas_on_five_nodes_survive_two_failures() {
    let fx = fixture(24 * 5);
    let s = loaded_store(
        &fx,
        StoreConfig {
            nodes: 5,
            replication: 3,
            block_size_limit: 2048,
            ..StoreConfig::default()
        },
    );
    let catalog = s.block_catalog();
    assert!(catalog.len() > 50);
    for b in &catalog {
        let distinct: BTreeSet<_> = b.placement.iter().collect();
        assert_eq!(distinct.len(), 3);
    }
    let spec = SliceSpec::new(
        ObjectSel::All,
        Metric::ALL.iter().map(|m| MetricKey::Actual(*m)),
        span(&fx),
        Grain::Hour,
        Agg::Mean,
    );
    let baseline = s.query_slice_uncached(&spec).unwrap();
    let nodes: Vec<String> = s.cluster_state().nodes.into_iter().map(|n| n.id).collect();
    for i in 0..5 {
        for j in i + 1..5 {
            s.fail_node(&nodes[i]).unwrap();
            s.fail_node(&nodes[j]).unwrap();
            assert!(s.query_slice_uncached(&spec).unwrap().same_content(&baseline));
            s.recover_node(&nodes[i]).unwrap();
            s.recover_node(&nodes[j]).unwrap();
        }
    }
    assert!(s.audit().ok);
}

#[test]
fn appends_need_enough_live_nodes() {
    let s = store();
    s.fail_node("node-0").unwrap();
    s.append(vec![fact("a", Metric::HeatEnergyKwh, T0, 1.0)]).unwrap();
    s.fail_node("node-1").unwrap();
    let err = s.append(vec![fact("a", Metric::HeatEnergyKwh, T0 + HOUR, 1.0)]).unwrap_err();
    assert!(matches!(err, StoreError::QuorumUnavailable(_)));
    assert!(err.is_retryable());
    assert!(matches!(s.fail_node("node-9"), Err(StoreError::UnknownNode(_))));
}

#[test]
fn recovery_restores_corrupt_replicas() {
    let s = loaded_store(
        &fixture(24),
        StoreConfig {
            block_size_limit: 4096,
            ..StoreConfig::default()
        },
    );
    let block = s.block_catalog()[3].clone();
    s.inject_corruption(&block.placement[0], &block.block_id, 10).unwrap();
    let report = s.audit();
    assert!(!report.ok);
    assert_eq!(report.violations.len(), 1);
    assert_eq!(report.violations[0].block_id, block.block_id);
    assert_eq!(report.violations[0].kind, ViolationKind::ChecksumMismatch);
    assert_eq!(s.cluster_state().under_replicated, 1);
    assert_eq!(s.repair().unwrap(), 1);
    assert!(s.audit().ok);
}

#[test]
fn disk_store_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store");
    let fx = fixture(24 * 3);
    let spec = SliceSpec::new(
        ObjectSel::All,
        Metric::ALL.iter().map(|m| MetricKey::Actual(*m)),
        span(&fx),
        Grain::Raw,
        Agg::Sum,
    );
    let before = {
        let s = CubeStore::open(&path, StoreConfig::default()).unwrap();
        for part in chunks(&fx, DAY) {
            s.append(part).unwrap();
        }
        s.append_batch("extra", vec![fact("zz", Metric::FlowM3h, T0, 1.0)]).unwrap();
        s.fail_node("node-2").unwrap();
        s.query_slice(&spec).unwrap()
    };
    assert!(CubeStore::exists(&path));
    let s = CubeStore::open(&path, StoreConfig::default()).unwrap();
    assert!(s.query_slice(&spec).unwrap().same_content(&before));
    assert!(s.has_batch("extra"));
    assert!(!s.cluster_state().nodes[2].alive);
    assert!(audit_dir(&path).unwrap().ok);

    let block = s.block_catalog()[0].clone();
    s.inject_corruption(&block.placement[0], &block.block_id, 0).unwrap();
    let report = audit_dir(&path).unwrap();
    assert_eq!(report.violated_blocks(), vec![block.block_id.clone()]);
    // One healthy replica left, so the store still opens.
    drop(s);
    let s = CubeStore::open(&path, StoreConfig::default()).unwrap();
    assert!(s.query_slice(&spec).unwrap().same_content(&before));
}

fn arb_facts() -> impl Strategy<Value = Vec<FactRecord>> {
    let row = (0..4usize, 0..3usize, 0..400i64, -50.0..500.0f64, 0..4u8, prop::bool::weighted(0.05));
    prop::collection::vec(row, 1..200).prop_map(|rows| {
        let mut seen = BTreeSet::new();
        rows.into_iter()
            .filter(|(o, m, t, ..)| seen.insert((*o, *m, *t)))
            .map(|(o, m, t, v, q, nan)| FactRecord {
                object_id: ObjectId::new(format!("o{o}")),
                metric: MetricKey::Actual(Metric::ALL[m]),
                ts: T0 + t * 15 * 60,
                value: if nan { f64::NAN } else { v },
                quality: Quality::from_code(q).unwrap(),
            })
            .collect()
    })
}

fn arb_spec() -> impl Strategy<Value = SliceSpec> {
    (
        prop::option::of(prop::collection::btree_set(0..4usize, 1..4)),
        prop::collection::btree_set(0..3usize, 1..3),
        0..400i64,
        1..400i64,
        prop::sample::select(vec![Grain::Raw, Grain::Hour, Grain::Day, Grain::Month]),
        prop::sample::select(vec![Agg::Sum, Agg::Mean, Agg::Min, Agg::Max]),
    )
        .prop_map(|(objs, metrics, from, len, grain, agg)| {
            let sel = match objs {
                None => ObjectSel::All,
                Some(s) => ObjectSel::Set(s.into_iter().map(|o| ObjectId::new(format!("o{o}"))).collect()),
            };
            SliceSpec::new(
                sel,
                metrics.into_iter().map(|m| MetricKey::Actual(Metric::ALL[m])),
                Window::new(T0 + from * 15 * 60, T0 + (from + len) * 15 * 60),
                grain,
                agg,
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slices_match_naive_aggregation(facts in arb_facts(), specs in prop::collection::vec(arb_spec(), 1..8)) {
        let s = store();
        let mid = facts.len() / 2;
        s.append(facts[..mid].to_vec()).unwrap();
        s.append(facts[mid..].to_vec()).unwrap();
        for spec in &specs {
            let got = s.query_slice(spec).unwrap();
            let want = naive_cells(&s, spec);
            prop_assert_eq!(got.cells.len(), want.len());
            for (a, b) in got.cells.iter().zip(&want) {
                prop_assert!(a.bit_eq(b), "{:?} vs {:?}", a, b);
            }
        }
    }

    #[test]
    fn append_order_does_not_change_answers(facts in arb_facts(), spec in arb_spec(), seed in any::<u64>()) {
        let one = store();
        one.append(facts.clone()).unwrap();
        let mut shuffled = facts;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let many = store();
        for part in shuffled.chunks(7) {
            many.append(part.to_vec()).unwrap();
        }
        let a = one.query_slice(&spec).unwrap().cells;
        let b = many.query_slice(&spec).unwrap().cells;
        prop_assert_eq!(a.len(), b.len());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn every_block_is_placed_on_r_distinct_nodes(facts in arb_facts(), limit in 16usize..512, r in 1usize..=3) {
        let s = CubeStore::in_memory(StoreConfig { nodes: 4, replication: r, block_size_limit: limit, ..StoreConfig::default() }).unwrap();
        s.append(facts).unwrap();
        for b in s.block_catalog() {
            let distinct: BTreeSet<_> = b.placement.iter().collect();
            prop_assert_eq!(distinct.len(), r);
            prop_assert!(b.byte_len <= limit);
        }
        prop_assert!(s.audit().ok);
    }
}
