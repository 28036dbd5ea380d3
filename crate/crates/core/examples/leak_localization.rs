//! Locates a leak on the instrumented heat main from terminal magnitudes,
//! then lets the simulator raise the same alert.

use std::sync::Arc;

use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::mesh::leak::{locate, terminal_magnitudes};
use heatgrid::mesh::{build_topology, localize_leak, LeakEvent, Simulator};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new(FixtureConfig {
        hours: 48,
        ..FixtureConfig::kuznetsk_small()
    });
    let mesh = build_topology(&fx.mesh_config())?;
    let pipeline = &mesh.pipelines["main-1"];
    println!("pipeline {} length {} m", pipeline.pipeline_id, pipeline.length);

    for pos in [120.0, 450.0, 1333.0] {
        let event = LeakEvent {
            pipeline_id: "main-1".into(),
            true_pos: pos,
            onset: 0,
            severity: 0.5,
        };
        let m = terminal_magnitudes(pipeline, &event);
        let loc = locate(pipeline, &m)?;
        println!(
            "true {pos:>7.1}  estimated {:>7.1}  segment {}-{}",
            loc.est_pos, loc.segment.0, loc.segment.1
        );
    }

    let event = LeakEvent {
        pipeline_id: "main-1".into(),
        true_pos: 780.0,
        onset: 6 * 3600,
        severity: 0.8,
    };
    println!("direct: {:?}", localize_leak(&mesh, &event)?);
    let mut sim = Simulator::new(mesh, Arc::new(fx));
    sim.inject_leak(event);
    sim.run(12 * 3600);
    for alert in sim.alerts() {
        println!("alert: {}", serde_json::to_string(&alert)?);
    }
    Ok(())
}
