//! Replica placement under node failures: reads survive r-1 failures,
//! appends need r live nodes, and recovery repairs what was missed.

use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::model::{Metric, MetricKey, Window};
use heatgrid::store::{Agg, CubeStore, FactRecord, Grain, ObjectSel, SliceSpec, StoreConfig, StoreError};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new(FixtureConfig {
        hours: 24 * 14,
        ..FixtureConfig::kuznetsk_small()
    });
    let dir = tempfile::tempdir()?;
    let config = StoreConfig {
        nodes: 5,
        replication: 3,
        ..StoreConfig::default()
    };
    let store = CubeStore::open(dir.path().join("store"), config)?;
    let readings = fx.readings();
    let (first, second) = readings.split_at(readings.len() / 2);
    store.append(first.iter().map(FactRecord::from).collect())?;

    let spec = SliceSpec::new(
        ObjectSel::All,
        [MetricKey::Actual(Metric::HeatEnergyKwh)],
        Window::new(fx.config.start_ts, fx.config.end_ts()),
        Grain::Day,
        Agg::Sum,
    );
    store.fail_node("node-0")?;
    store.fail_node("node-3")?;
    println!("two nodes down: {} cells", store.query_slice_uncached(&spec)?.cells.len());

    store.fail_node("node-4")?;
    match store.append(second.iter().map(FactRecord::from).collect()) {
        Err(e @ StoreError::QuorumUnavailable(_)) => println!("append refused: {e}"),
        other => println!("unexpected: {other:?}"),
    }
    match store.query_slice_uncached(&spec) {
        Ok(s) => println!("three down, read still served ({} cells)", s.cells.len()),
        Err(e) => println!("three down, read refused: {e}"),
    }

    for node in ["node-0", "node-3", "node-4"] {
        let state = store.recover_node(node)?;
        println!("recovered {node}: under-replicated {}", state.under_replicated);
    }
    store.append(second.iter().map(FactRecord::from).collect())?;
    let report = store.audit();
    println!("audit ok={} blocks={} replicas={}", report.ok, report.blocks_checked, report.replicas_checked);

    let victim = store.block_catalog()[0].block_id.clone();
    let holder = store.block_catalog()[0].placement[0].clone();
    store.inject_corruption(&holder, &victim, 7)?;
    println!("after corruption: violated {:?}", store.audit().violated_blocks());
    println!("repaired {} replicas, audit ok={}", store.repair()?, store.audit().ok);
    Ok(())
}
