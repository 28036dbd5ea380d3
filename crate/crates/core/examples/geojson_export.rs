//! Writes hyper-table leaves as GeoJSON points for a map overlay.

use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::geo::{export_geojson, write_geojson};
use heatgrid::hypertable::TimeCursor;
use heatgrid::model::{Window, DAY};
use heatgrid::scenario::default_modes;
use heatgrid::store::{CubeStore, FactRecord, StoreConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "heat-map.geojson".into());
    let fx = Fixture::new(FixtureConfig {
        hours: 24 * 7,
        ..FixtureConfig::kuznetsk_small()
    });
    let store = CubeStore::in_memory(StoreConfig::default())?;
    store.append(fx.readings().iter().map(FactRecord::from).collect())?;

    let cursor = TimeCursor::archive(Window::new(fx.config.start_ts, fx.config.start_ts + 7 * DAY));
    let export = export_geojson(&store, &fx.hierarchy(), &default_modes()[0], &cursor, &fx.device_map())?;
    write_geojson(out.as_ref(), &export)?;
    println!("{} features written to {out}", export.features);
    let first = &export.collection["features"][0];
    println!("{}", serde_json::to_string_pretty(first)?);
    Ok(())
}
