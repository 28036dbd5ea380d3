//! Raw device readings in mixed units through normalization, consolidation
//! across transports and immersion into the store.

use heatgrid::fixture::{Fixture, FixtureConfig};
use heatgrid::ingest::{
    consolidate, immerse, normalize, IntervalPolicy, RangeRules, RawReading, Source, SourcedReadings, UnitRegistry,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new(FixtureConfig {
        hours: 72,
        ..FixtureConfig::kuznetsk_small()
    });
    let mut raw = fx.all_raw();
    println!("{} raw readings, e.g. {:?}", raw.len(), raw[0]);

    // A few bad rows alongside the good ones.
    raw.push(RawReading {
        unit: "BTU".into(),
        ..raw[0].clone()
    });
    raw.push(RawReading {
        device_id: "hc-99".into(),
        ..raw[1].clone()
    });

    let registry = UnitRegistry::default();
    let n = normalize(&raw, &registry, &fx.device_map(), &RangeRules::default());
    println!("normalized {} readings, rejected {:?}", n.readings.len(), n.reject_summary());

    // The same readings redelivered over cellular lose to the mesh copy.
    let (early, late) = n.readings.split_at(n.readings.len() / 2);
    let batch = consolidate(
        &[
            SourcedReadings {
                source: Source::Mesh,
                readings: n.readings.clone(),
            },
            SourcedReadings {
                source: Source::Cellular,
                readings: late.to_vec(),
            },
        ],
        &IntervalPolicy::default(),
    );
    println!("batch {} with {} readings ({} before the split)", batch.batch_id, batch.readings.len(), early.len());

    let store = heatgrid::store::CubeStore::in_memory(Default::default())?;
    let receipt = immerse(&batch, &store)?;
    println!("immersed: {receipt:?}");
    println!("again:    {:?}", immerse(&batch, &store)?);
    Ok(())
}
