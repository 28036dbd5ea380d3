//! GeoJSON export of hyper-table leaves for map overlays.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::hypertable::{self, AggMode, HierarchyMap, HyperTable, HyperTableError, TimeCursor};
use crate::ingest::DeviceMap;
use crate::model::ObjectId;
use crate::store::CubeStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoExport {
    pub collection: Value,
    pub features: usize,
    /// Objects left out for want of coordinates.
    pub missing_coordinates: Vec<ObjectId>,
}

/// One point feature per hyper-table leaf. Properties carry each column's
/// value (null when absent), contributing count and color class.
pub fn features_from_table(table: &HyperTable, locations: &BTreeMap<ObjectId, [f64; 2]>) -> GeoExport {
    let mut features = Vec::new();
    let mut missing = Vec::new();
    for leaf in table.root.leaves() {
        let object = ObjectId::new(leaf.label.clone());
        let Some([lon, lat]) = locations.get(&object).copied() else {
            missing.push(object);
            continue;
        };
        let mut props = Map::new();
        props.insert("object_id".into(), json!(leaf.label));
        props.insert("path".into(), json!(leaf.path));
        for cell in &leaf.cells {
            let key = cell.column.to_string();
            props.insert(key.clone(), json!(cell.value));
            props.insert(format!("{key}.count"), json!(cell.count));
            props.insert(format!("{key}.color"), json!(cell.color));
        }
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [lon, lat]},
            "properties": props,
        }));
    }
    GeoExport {
        features: features.len(),
        collection: json!({
            "type": "FeatureCollection",
            "properties": {
                "mode": table.mode.id,
                "cursor": table.cursor,
                "built_at_version": table.built_at_version,
            },
            "features": features,
        }),
        missing_coordinates: missing,
    }
}

pub fn export_geojson(
    store: &CubeStore,
    hierarchy: &HierarchyMap,
    mode: &AggMode,
    cursor: &TimeCursor,
    devices: &DeviceMap,
) -> Result<GeoExport, HyperTableError> {
    let table = hypertable::build(store, hierarchy, mode, cursor)?;
    Ok(features_from_table(&table, &devices.object_locations()))
}

/// Writes the collection even when some objects lack coordinates.
pub fn write_geojson(path: &Path, export: &GeoExport) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &export.collection)?;
    f.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{Fixture, FixtureConfig};
    use crate::hypertable::{ColorRule, ColumnAgg, ColumnSpec, OBJECT_LEVEL};
    use crate::model::{Metric, MetricKey, Window, HOUR};
    use crate::store::{FactRecord, Grain, StoreConfig};

    #[test]
    fn one_feature_per_located_leaf() {
        let fx = Fixture::new(FixtureConfig {
            hours: 48,
            ..FixtureConfig::kuznetsk_small()
        });
        let store = CubeStore::in_memory(StoreConfig::default()).unwrap();
        store
            .append(fx.readings().iter().map(FactRecord::from).collect())
            .unwrap();
        let key = MetricKey::Actual(Metric::HeatEnergyKwh);
        let mode = AggMode {
            id: "m".into(),
            columns: vec![ColumnSpec {
                key: key.clone(),
                agg: ColumnAgg::Sum,
            }],
            levels: vec!["district".into(), OBJECT_LEVEL.into()],
            color_rules: vec![ColorRule {
                column: key.clone(),
                thresholds: vec![500.0],
                classes: vec!["low".into(), "high".into()],
            }],
            grain: Grain::Hour,
        };
        let cursor = TimeCursor::archive(Window::new(fx.config.start_ts, fx.config.start_ts + 24 * HOUR));
        let mut devices = fx.device_map();
        devices.devices.retain(|_, d| d.object_id.as_str() != "obj-02");
        let out = export_geojson(&store, &fx.hierarchy(), &mode, &cursor, &devices).unwrap();
        assert_eq!(out.features, 11);
        assert_eq!(out.missing_coordinates, vec![ObjectId::new("obj-02")]);
        let table = hypertable::build(&store, &fx.hierarchy(), &mode, &cursor).unwrap();
        for f in out.collection["features"].as_array().unwrap() {
            let id = f["properties"]["object_id"].as_str().unwrap();
            let leaf = table.root.leaves().into_iter().find(|l| l.label == id).unwrap();
            assert_eq!(f["properties"]["heat_energy_kwh"].as_f64(), leaf.cells[0].value);
            let color = f["properties"]["heat_energy_kwh.color"].as_str().unwrap();
            assert!(["low", "high"].contains(&color));
        }
    }
}
