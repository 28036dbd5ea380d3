//! Ranks heating points by consumption with the parallel map/reduce engine
//! and runs a custom job registered at runtime.

use heatgrid::aggregate::{run_job, top_consumers, JobLibrary, JobSpec};
use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::model::{Metric, MetricKey, Window, DAY};
use heatgrid::store::{Agg, Cell, CubeStore, FactRecord, Grain, ObjectSel, SliceSpec, StoreConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new(FixtureConfig {
        hours: 24 * 60,
        ..FixtureConfig::kuznetsk_small()
    });
    let store = CubeStore::in_memory(StoreConfig::default())?;
    store.append(fx.readings().iter().map(FactRecord::from).collect())?;
    let window = Window::new(fx.config.start_ts, fx.config.end_ts());

    let top = top_consumers(&store, window, 5)?;
    print!("{}", top.to_text());

    let mut lib = JobLibrary::default();
    lib.register_map("weekday", |c: &Cell| {
        let day = (c.bucket_ts.div_euclid(DAY) + 4).rem_euclid(7);
        c.value.map(|v| (format!("weekday-{day}"), v)).into_iter().collect()
    })?;
    if let Err(e) = lib.register_reduce("difference", |a, b| a - b) {
        println!("refused: {e}");
    }
    let spec = JobSpec {
        input: SliceSpec::new(
            ObjectSel::All,
            [MetricKey::Actual(Metric::HeatEnergyKwh)],
            window,
            Grain::Day,
            Agg::Sum,
        ),
        map_fn: "weekday".into(),
        reduce_fn: "max".into(),
        workers: 4,
        top_k: None,
    };
    let peaks = run_job(&spec, &store, &lib)?;
    println!("\npeak daily network load by weekday");
    print!("{}", peaks.to_text());
    Ok(())
}
