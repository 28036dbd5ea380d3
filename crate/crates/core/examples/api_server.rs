//! Serves the HTTP API over an in-memory fixture store and queries it.
//! Pass `--serve` to keep listening on 127.0.0.1:8080.

use std::sync::Arc;

use heatgrid::api::{spawn, ApiState};
use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::mesh::build_topology;
use heatgrid::scenario::default_modes;
use heatgrid::store::{CubeStore, FactRecord, StoreConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let serve = std::env::args().any(|a| a == "--serve");
    let fx = Fixture::new(FixtureConfig {
        hours: 24 * 40,
        ..FixtureConfig::kuznetsk_small()
    });
    let store = CubeStore::in_memory(StoreConfig::default())?;
    store.append(fx.readings().iter().map(FactRecord::from).collect())?;
    let state = Arc::new(
        ApiState::new(Arc::new(store))
            .with_hierarchy(fx.hierarchy())
            .with_devices(fx.device_map())
            .with_mesh(build_topology(&fx.mesh_config())?)
            .with_exog(fx.weather(fx.config.start_ts, fx.config.end_ts() + 48 * 3600))
            .with_token(Some("demo-token".into()))
            .with_modes(default_modes()),
    );
    let addr = if serve { "127.0.0.1:8080" } else { "127.0.0.1:0" };
    let (local, server) = spawn(state, addr.parse()?, &["*".to_string()]).await?;
    let base = format!("http://{local}");
    println!("listening on {base}");

    let http = reqwest::Client::new();
    let health: serde_json::Value = http.get(format!("{base}/healthz")).send().await?.json().await?;
    println!("healthz {health}");
    let (from, to) = (fx.config.start_ts, fx.config.start_ts + 7 * 86_400);
    let table: serde_json::Value = http
        .get(format!("{base}/hypertable?mode=consumption&from={from}&to={to}"))
        .send()
        .await?
        .json()
        .await?;
    println!("hypertable {} root {}", table["schema"], table["root"]["cells"][0]);

    let job: serde_json::Value = http
        .post(format!("{base}/forecast/run"))
        .json(&serde_json::json!({"object_id": "obj-03", "metric": "heat_energy_kwh", "horizon": 24}))
        .send()
        .await?
        .json()
        .await?;
    println!("forecast job {job}");
    loop {
        let v: serde_json::Value = http.get(format!("{base}/forecast/obj-03/heat_energy_kwh")).send().await?.json().await?;
        if v["status"] == "done" {
            println!("forecast model {}", v["result"]["forecast"]["model"]["spec"]);
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    }
    if serve {
        server.await?;
    }
    Ok(())
}
