mod common;

use std::collections::BTreeSet;
use std::io::BufReader;

use heatgrid::ingest::{
    consolidate, immerse, normalize, read_ndjson, write_ndjson, Batch, DeviceMap, IngestError, IntervalPolicy,
    RangeRules, RawReading, Reading, Source, SourcedReadings, UnitRegistry,
};
use heatgrid::model::{Metric, MetricKey, ObjectId, Quality, Window, HOUR};
use heatgrid::store::{Agg, CubeStore, Grain, ObjectSel, SliceSpec, StoreConfig};
use proptest::prelude::*;

use common::*;

fn one_device() -> DeviceMap {
    let mut d = DeviceMap::default();
    d.insert("dev-1", ObjectId::new("obj-1"), None);
    d
}

fn raw(metric: &str, ts: i64, value: f64, unit: &str) -> RawReading {
    RawReading {
        device_id: "dev-1".into(),
        metric: metric.into(),
        ts,
        value,
        unit: unit.into(),
    }
}

fn reading(ts: i64, value: f64) -> Reading {
    Reading {
        object_id: ObjectId::new("obj-1"),
        metric: Metric::HeatEnergyKwh,
        ts,
        value,
        quality: Quality::Good,
    }
}

#[test]
fn fixture_device_units_normalize_to_canonical_values() {
    let fx = fixture(48);
    let registry = UnitRegistry::default();
    let n = normalize(&fx.all_raw(), &registry, &fx.device_map(), &RangeRules::default());
    assert!(n.rejects.is_empty());
    let mut expected = fx.readings();
    expected.sort_by(|a, b| (&a.object_id, a.metric, a.ts).cmp(&(&b.object_id, b.metric, b.ts)));
    assert_eq!(n.readings.len(), expected.len());
    let units: BTreeSet<&str> = fx.all_raw().iter().map(|r| registry.get(&r.unit).map(|_| "known").unwrap_or("unknown")).collect();
    assert_eq!(units, ["known"].into());
    for (got, want) in n.readings.iter().zip(&expected) {
        assert_eq!((&got.object_id, got.metric, got.ts), (&want.object_id, want.metric, want.ts));
        // Devices report six decimals in their own unit; Gcal is the coarsest.
        let tolerance = 0.5e-6 * 1163.0 + 1e-9 * want.value.abs();
        assert!((got.value - want.value).abs() <= tolerance, "{got:?} vs {want:?}");
        assert_eq!(got.quality, Quality::Good);
    }
}

#[test]
fn every_reject_code_is_reported() {
    let rows = vec![
        raw("heat_energy_kwh", 0, 1.0, "BTU"),
        RawReading {
            device_id: "ghost".into(),
            ..raw("heat_energy_kwh", 0, 1.0, "kWh")
        },
        raw("pressure_bar", 0, 1.0, "kWh"),
        raw("flow_m3h", 0, 1.0, "kWh"),
        raw("heat_energy_kwh", -5, 1.0, "kWh"),
        raw("heat_energy_kwh", 0, 1.0, "kWh"),
    ];
    let n = normalize(&rows, &UnitRegistry::default(), &one_device(), &RangeRules::default());
    assert_eq!(n.readings.len(), 1);
    let summary = n.reject_summary();
    for code in ["UnknownUnit", "UnknownDevice", "UnknownMetric", "UnitMismatch", "NegativeTimestamp"] {
        assert_eq!(summary.get(code), Some(&1), "{code}");
    }
    let rows = n.reject_rows();
    assert!(rows[0].error.starts_with("UnknownUnit"));
    let line = serde_json::to_value(&rows[0]).unwrap();
    assert_eq!(line["device_id"], "dev-1");
    assert_eq!(line["unit"], "BTU");
}

#[test]
fn custom_units_load_from_toml() {
    let registry = UnitRegistry::from_toml(
        r#"
        [units.kcal]
        dimension = "energy"
        scale = 1.163
        divisor = 1000.0
        "#,
    )
    .unwrap();
    let n = normalize(
        &[raw("heat_energy_kwh", 0, 1000.0, "kcal")],
        &registry,
        &one_device(),
        &RangeRules::default(),
    );
    assert!((n.readings[0].value - 1.163).abs() < 1e-12);
}

#[test]
fn consolidated_batch_lands_in_the_store_once() {
    let fx = fixture(24);
    let n = normalize(&fx.all_raw(), &UnitRegistry::default(), &fx.device_map(), &RangeRules::default());
    let batch = consolidate(
        &[SourcedReadings {
            source: Source::Mesh,
            readings: n.readings.clone(),
        }],
        &IntervalPolicy::default(),
    );
    let store = CubeStore::in_memory(StoreConfig::default()).unwrap();
    let first = immerse(&batch, &store).unwrap();
    assert_eq!(first.records, n.readings.len());
    let again = immerse(&batch, &store).unwrap();
    assert!(again.duplicate);
    assert_eq!(again.store_version, first.store_version);
    let spec = SliceSpec::new(ObjectSel::All, [MetricKey::Actual(Metric::FlowM3h)], span(&fx), Grain::Raw, Agg::Sum);
    assert_eq!(store.query_slice(&spec).unwrap().cells.len(), 12 * 24);
}

#[test]
fn empty_batch_is_an_error() {
    let store = CubeStore::in_memory(StoreConfig::default()).unwrap();
    let batch = Batch {
        batch_id: "b".into(),
        readings: vec![],
        source: Source::File,
    };
    assert!(matches!(immerse(&batch, &store), Err(IngestError::EmptyBatch)));
}

#[test]
fn ndjson_round_trip_keeps_gaps_as_null() {
    let rows = vec![reading(0, 1.5), Reading {
        value: f64::NAN,
        quality: Quality::Missing,
        ..reading(HOUR, 0.0)
    }];
    let mut buf = Vec::new();
    write_ndjson(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("\"value\":null"));
    let back: Vec<Reading> = read_ndjson(BufReader::new(&buf[..])).unwrap();
    assert_eq!(back[0], rows[0]);
    assert!(back[1].value.is_nan() && back[1].quality == Quality::Missing);

    let bad = b"{\"device_id\":\"x\"}\n\n";
    match read_ndjson::<RawReading>(BufReader::new(&bad[..])) {
        Err(IngestError::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn gaps_are_filled_on_the_metric_interval() {
    let policy = IntervalPolicy {
        default_seconds: HOUR,
        per_metric: [(Metric::HeatEnergyKwh, 15 * 60)].into(),
    };
    let batch = consolidate(
        &[SourcedReadings {
            source: Source::File,
            readings: vec![reading(0, 1.0), reading(HOUR, 2.0)],
        }],
        &policy,
    );
    let ts: Vec<i64> = batch.readings.iter().map(|r| r.ts).collect();
    assert_eq!(ts, vec![0, 900, 1800, 2700, 3600]);
    assert_eq!(batch.readings.iter().filter(|r| r.quality == Quality::Missing).count(), 3);
    let store = CubeStore::in_memory(StoreConfig::default()).unwrap();
    immerse(&batch, &store).unwrap();
    let spec = SliceSpec::new(
        ObjectSel::All,
        [MetricKey::Actual(Metric::HeatEnergyKwh)],
        Window::new(0, 2 * HOUR),
        Grain::Hour,
        Agg::Mean,
    );
    let cell = &store.query_slice(&spec).unwrap().cells[0];
    assert_eq!((cell.count, cell.valid, cell.value), (4, 1, Some(1.0)));
}

fn arb_readings() -> impl Strategy<Value = Vec<Reading>> {
    prop::collection::btree_map(0..60i64, 0.0..100.0f64, 1..40)
        .prop_map(|m| m.into_iter().map(|(h, v)| reading(h * HOUR, v)).collect())
}

proptest! {
    #[test]
    fn unit_conversions_agree_with_the_joule(kwh in 0.0..1.0e5f64) {
        let reg = UnitRegistry::default();
        let joules = kwh * 3.6e6;
        for (unit, per_unit_joules) in [("Wh", 3600.0), ("MWh", 3.6e9), ("GJ", 1.0e9), ("MJ", 1.0e6), ("Gcal", 4.1868e9)] {
            let value = joules / per_unit_joules;
            let back = reg.get(unit).unwrap().to_canonical(value);
            prop_assert!((back - kwh).abs() <= 1e-9 * kwh.max(1.0), "{} {} -> {}", unit, value, back);
        }
    }

    #[test]
    fn redelivery_does_not_change_the_batch(readings in arb_readings(), noise in 0.0..1.0f64) {
        let mesh = SourcedReadings { source: Source::Mesh, readings: readings.clone() };
        let alone = consolidate(std::slice::from_ref(&mesh), &IntervalPolicy::default());
        // A late cellular copy with different values loses to the mesh copy.
        let cellular = SourcedReadings {
            source: Source::Cellular,
            readings: readings.iter().map(|r| Reading { value: r.value + noise + 1.0, ..r.clone() }).collect(),
        };
        let both = consolidate(&[cellular.clone(), mesh.clone(), mesh.clone()], &IntervalPolicy::default());
        prop_assert_eq!(&both.readings.len(), &alone.readings.len());
        prop_assert_eq!(&both.batch_id, &alone.batch_id);
        prop_assert_eq!(both.source, Source::Mesh);
    }

    #[test]
    fn consolidated_series_is_gap_free_and_sorted(readings in arb_readings()) {
        let batch = consolidate(&[SourcedReadings { source: Source::File, readings: readings.clone() }], &IntervalPolicy::default());
        let ts: Vec<i64> = batch.readings.iter().map(|r| r.ts).collect();
        let first = readings.first().unwrap().ts;
        let last = readings.last().unwrap().ts;
        prop_assert_eq!(ts, (0..=(last - first) / HOUR).map(|k| first + k * HOUR).collect::<Vec<_>>());
        let good = batch.readings.iter().filter(|r| r.quality == Quality::Good).count();
        prop_assert_eq!(good, readings.len());
    }
}
