//! Slice queries served from the cache, and the cache entries an append
//! invalidates.

use std::time::Instant;

use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::model::{Metric, MetricKey, ObjectId, Quality, Window, DAY};
use heatgrid::store::{Agg, CubeStore, FactRecord, Grain, ObjectSel, SliceSpec, StoreConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new(FixtureConfig {
        hours: 24 * 90,
        ..FixtureConfig::kuznetsk_small()
    });
    let store = CubeStore::in_memory(StoreConfig::default())?;
    store.append(fx.readings().iter().map(FactRecord::from).collect())?;
    println!("{} facts in {} blocks", store.fact_count(), store.block_catalog().len());

    let start = fx.config.start_ts;
    let monthly = SliceSpec::new(
        ObjectSel::All,
        [MetricKey::Actual(Metric::HeatEnergyKwh)],
        Window::new(start, start + 90 * DAY),
        Grain::Month,
        Agg::Sum,
    );
    let early = SliceSpec::new(
        ObjectSel::Set([ObjectId::new("obj-01")].into()),
        [MetricKey::Actual(Metric::SupplyTempC)],
        Window::new(start, start + 7 * DAY),
        Grain::Day,
        Agg::Mean,
    );
    for round in 0..2 {
        let t = Instant::now();
        let s = store.query_slice(&monthly)?;
        store.query_slice(&early)?;
        println!("round {round}: {} cells in {:?}", s.cells.len(), t.elapsed());
    }
    println!("{:?}", store.cache_stats());

    // A late correction in the last week touches the monthly slice only.
    store.append(vec![FactRecord {
        object_id: ObjectId::new("obj-01"),
        metric: MetricKey::Actual(Metric::SupplyTempC),
        ts: start + 89 * DAY + 1,
        value: 95.0,
        quality: Quality::Good,
    }])?;
    let cached = store.cached_specs();
    println!("monthly still cached: {}", cached.contains(&monthly));
    println!("first week still cached: {}", cached.contains(&early));
    for c in store.query_slice(&monthly)?.cells.iter().filter(|c| c.object_id.as_str() == "obj-01") {
        println!("  {} {} {:?} n={}", c.object_id, c.bucket_ts, c.value, c.count);
    }
    Ok(())
}
