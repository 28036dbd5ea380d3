//! Builds the city/district/network table over the fixture, drills into a
//! district, switches aggregation mode and moves the time cursor.

use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::hypertable::{build, ColumnAgg, ColumnSpec, TimeCursor};
use heatgrid::model::{Metric, MetricKey, Window, DAY};
use heatgrid::scenario::default_modes;
use heatgrid::store::{CubeStore, FactRecord, Grain, StoreConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new(FixtureConfig {
        hours: 24 * 30,
        ..FixtureConfig::kuznetsk_small()
    });
    let store = CubeStore::in_memory(StoreConfig::default())?;
    store.append(fx.readings().iter().map(FactRecord::from).collect())?;
    let hierarchy = fx.hierarchy();
    let mode = default_modes().remove(0);

    let week = TimeCursor::archive(Window::new(fx.config.start_ts, fx.config.start_ts + 7 * DAY));
    let table = build(&store, &hierarchy, &mode, &week)?;
    print!("{}", table.to_report().text);
    assert!(table.consistency_violations().is_empty());

    let district = &table.root.children[1];
    println!("\ndrill into {}:", district.path);
    for leaf in district.leaves() {
        println!("  {:<8} {:>12.1} kWh", leaf.label, leaf.cells[0].value.unwrap_or(f64::NAN));
    }

    // Flat view: districts straight to objects, flow only.
    let mut flat = mode.clone();
    flat.id = "flow".into();
    flat.levels = vec!["district".into(), "object".into()];
    flat.columns = vec![ColumnSpec {
        key: MetricKey::Actual(Metric::FlowM3h),
        agg: ColumnAgg::Mean,
    }];
    flat.color_rules.clear();
    flat.grain = Grain::Hour;
    let flat_table = table.edit_mode(&store, flat)?;
    println!("\nflat view depth {} (was {})", flat_table.root.depth(), table.root.depth());

    for w in 1..4 {
        let moved = table.set_cursor(&store, week.shift(w * 7 * DAY))?;
        println!("week {}: city total {:.0} kWh", w + 1, moved.root.cells[0].value.unwrap_or(0.0));
    }
    Ok(())
}
