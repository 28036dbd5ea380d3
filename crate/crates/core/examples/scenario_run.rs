//! The whole pipeline on the stock fixture year: simulate, ingest, rank,
//! forecast, tabulate. Artifacts land in the given directory.
//!
//! cargo run --release --example scenario_run -- out/

use std::path::PathBuf;

use heatgrid::scenario::{scenario_run, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("scenario-out"));
    let config = ScenarioConfig::kuznetsk_small();
    let t = std::time::Instant::now();
    let run = scenario_run(&config, ".".as_ref(), &out)?;
    let m = &run.manifest;
    println!("{} in {:?}", m.name, t.elapsed());
    println!("readings {} in {} batches, store version {}", m.readings, m.batches, m.store_version);
    println!(
        "mesh frames {} cellular {} buffered {}",
        m.mesh.mesh_frames, m.mesh.cellular_frames, m.buffered_readings
    );
    println!("alerts {}, geojson features {}", m.alerts, m.geojson_features);
    for kv in &m.top_consumers {
        println!("  {:<8} {:>14.1} kWh", kv.key, kv.value);
    }
    for f in m.forecasts.iter().take(4) {
        println!("  {} {} mae {:.3}", f.object_id, f.model, f.holdout_mae);
    }
    println!("{} artifacts in {}", m.artifacts.len(), run.out_dir.display());
    Ok(())
}
