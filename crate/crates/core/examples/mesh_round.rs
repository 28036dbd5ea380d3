//! One simulated day of the fixture collection network: routes, duty cycle
//! and what reached the coordinators.

use std::sync::Arc;

use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::mesh::{build_topology, Simulator, Transport};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new(FixtureConfig {
        hours: 24,
        ..FixtureConfig::kuznetsk_small()
    });
    let mesh = build_topology(&fx.mesh_config())?;
    for dev in mesh.end_devices().take(3) {
        println!(
            "{:<10} depth {} repeaters {}  {}",
            dev.node_id,
            mesh.depth(&dev.node_id),
            mesh.repeater_hops(&dev.node_id),
            mesh.route(&dev.node_id).join(" -> ")
        );
    }

    let mut sim = Simulator::new(mesh, Arc::new(fx));
    let frames = sim.run(24 * 3600 + 3600);
    let stats = sim.stats();
    let cellular = frames.iter().filter(|f| f.transport == Transport::Cellular).count();
    println!("frames {} (cellular {cellular})", frames.len());
    println!(
        "generated {} delivered {} lost transmissions {}",
        stats.generated_readings,
        stats.delivered_readings(),
        stats.lost_transmissions
    );
    let latency = frames.iter().map(|f| f.delivered_at - f.created_at).max().unwrap_or(0);
    println!("worst delivery latency {latency} s");
    Ok(())
}
