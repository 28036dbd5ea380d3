use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Dimension, Metric, ObjectId};

/// Linear conversion into the canonical unit of a dimension:
/// `canonical = (value * scale + shift) / divisor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDef {
    pub dimension: Dimension,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub shift: f64,
    #[serde(default = "one")]
    pub divisor: f64,
}

fn one() -> f64 {
    1.0
}

impl UnitDef {
    pub fn to_canonical(&self, value: f64) -> f64 {
        (value * self.scale + self.shift) / self.divisor
    }
}

/// Registry of device-side unit codes. Canonical units are kWh, m³/h and °C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRegistry {
    pub units: BTreeMap<String, UnitDef>,
}

impl Default for UnitRegistry {
    fn default() -> Self {
        let def = |dimension, scale, shift, divisor| UnitDef {
            dimension,
            scale,
            shift,
            divisor,
        };
        use Dimension::*;
        let units = [
            ("kWh", def(Energy, 1.0, 0.0, 1.0)),
            ("Wh", def(Energy, 1.0, 0.0, 1000.0)),
            ("MWh", def(Energy, 1000.0, 0.0, 1.0)),
            // 1 GJ = 10^9 J, 1 kWh = 3.6·10^6 J.
            ("GJ", def(Energy, 1000.0, 0.0, 3.6)),
            ("MJ", def(Energy, 1.0, 0.0, 3.6)),
            // International-table calorie: 1 Gcal = 4.1868 GJ = 1163 kWh.
            ("Gcal", def(Energy, 1163.0, 0.0, 1.0)),
            ("m3/h", def(Flow, 1.0, 0.0, 1.0)),
            ("l/s", def(Flow, 3.6, 0.0, 1.0)),
            ("l/min", def(Flow, 0.06, 0.0, 1.0)),
            ("m3/s", def(Flow, 3600.0, 0.0, 1.0)),
            ("C", def(Temperature, 1.0, 0.0, 1.0)),
            ("degC", def(Temperature, 1.0, 0.0, 1.0)),
            ("K", def(Temperature, 1.0, -273.15, 1.0)),
            ("F", def(Temperature, 5.0, -160.0, 9.0)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        UnitRegistry { units }
    }
}

impl UnitRegistry {
    pub fn get(&self, code: &str) -> Option<&UnitDef> {
        self.units.get(code)
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub object_id: ObjectId,
    /// `[lon, lat]`, used for map export.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<[f64; 2]>,
}

/// Resolves device identifiers to the monitoring object they instrument.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceMap {
    pub devices: BTreeMap<String, DeviceEntry>,
}

impl DeviceMap {
    pub fn get(&self, device_id: &str) -> Option<&DeviceEntry> {
        self.devices.get(device_id)
    }

    pub fn insert(&mut self, device_id: impl Into<String>, object_id: ObjectId, location: Option<[f64; 2]>) {
        self.devices
            .insert(device_id.into(), DeviceEntry { object_id, location });
    }

    /// Coordinates per object: the first located device (by id) wins.
    pub fn object_locations(&self) -> BTreeMap<ObjectId, [f64; 2]> {
        let mut out = BTreeMap::new();
        for entry in self.devices.values() {
            if let Some(loc) = entry.location {
                out.entry(entry.object_id.clone()).or_insert(loc);
            }
        }
        out
    }

    pub fn objects(&self) -> std::collections::BTreeSet<ObjectId> {
        self.devices.values().map(|d| d.object_id.clone()).collect()
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Plausible canonical-unit ranges; values outside are kept but flagged
/// suspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRules {
    pub ranges: BTreeMap<Metric, (f64, f64)>,
}

impl Default for RangeRules {
    fn default() -> Self {
        RangeRules {
            ranges: [
                (Metric::HeatEnergyKwh, (0.0, 1.0e6)),
                (Metric::FlowM3h, (0.0, 1.0e5)),
                (Metric::SupplyTempC, (-50.0, 200.0)),
                (Metric::ReturnTempC, (-50.0, 200.0)),
                (Metric::ElectricKwh, (0.0, 1.0e6)),
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl RangeRules {
    pub fn plausible(&self, metric: Metric, value: f64) -> bool {
        match self.ranges.get(&metric) {
            Some(&(lo, hi)) => (lo..=hi).contains(&value),
            None => true,
        }
    }
}
