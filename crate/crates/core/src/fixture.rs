//! Deterministic synthetic district: objects, devices, weather and hourly
//! consumption, plus the matching mesh, device map and hierarchy.
//!
//! Every value is a pure function of (seed, object, metric, timestamp), so
//! any sample can be regenerated without replaying a stream.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::hypertable::HierarchyMap;
use crate::ingest::{DeviceMap, RawReading, Reading, UnitRegistry};
use crate::mesh::{MeshConfig, MeshParams, NodeConfig, PipelineConfig, Role, SampleSource, SegmentConfig};
use crate::model::{Metric, ObjectId, Quality, Timestamp, HOUR};

/// 2023-01-01T00:00:00Z.
pub const DEFAULT_START: Timestamp = 1_672_531_200;
const YEAR_SECONDS: f64 = 365.25 * 86_400.0;
const CITY: &str = "Novokuznetsk";
const CITY_LONLAT: [f64; 2] = [87.1099, 53.7557];
const DISTRICT_NAMES: [&str; 3] = ["Tsentralny", "Kuibyshevsky", "Zavodskoy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub name: String,
    pub objects: usize,
    pub districts: usize,
    pub networks_per_district: usize,
    pub start_ts: Timestamp,
    pub hours: i64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig::kuznetsk_small()
    }
}

impl FixtureConfig {
    /// 12 heating points in 3 districts, one year hourly.
    pub fn kuznetsk_small() -> Self {
        FixtureConfig {
            name: "kuznetsk-small".into(),
            objects: 12,
            districts: 3,
            networks_per_district: 2,
            start_ts: DEFAULT_START,
            hours: 8760,
            seed: 42,
        }
    }

    pub fn end_ts(&self) -> Timestamp {
        self.start_ts + self.hours * HOUR
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureObject {
    pub object_id: ObjectId,
    pub device_id: String,
    pub district: usize,
    pub network: usize,
    /// Planar offset from the city origin in meters.
    pub position: [f64; 2],
    pub heat_scale: f64,
    pub electric_scale: f64,
    /// Device-side unit per metric.
    pub units: BTreeMap<Metric, &'static str>,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub config: FixtureConfig,
    pub objects: Vec<FixtureObject>,
    registry: UnitRegistry,
    by_device: BTreeMap<String, usize>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform in [-1, 1), keyed by the arguments.
fn noise(seed: u64, a: u64, b: u64, c: i64) -> f64 {
    let h = splitmix(splitmix(splitmix(seed ^ a.rotate_left(17)) ^ b.rotate_left(41)) ^ c as u64);
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn metric_code(m: Metric) -> &'static str {
    match m {
        Metric::HeatEnergyKwh => "heat_energy",
        Metric::FlowM3h => "flow",
        Metric::SupplyTempC => "supply_temp",
        Metric::ReturnTempC => "return_temp",
        Metric::ElectricKwh => "electric_energy",
    }
}

fn metric_ix(m: Metric) -> u64 {
    Metric::ALL.iter().position(|x| *x == m).expect("listed") as u64
}

impl Fixture {
    pub fn new(config: FixtureConfig) -> Self {
        let districts = config.districts.max(1);
        let per_district = config.objects.div_ceil(districts).max(1);
        let networks = config.networks_per_district.max(1);
        let per_network = per_district.div_ceil(networks).max(1);
        let objects: Vec<FixtureObject> = (0..config.objects)
            .map(|i| {
                let district = i / per_district;
                let local = i % per_district;
                let network = local / per_network;
                let angle = TAU * district as f64 / districts as f64;
                let center = [3000.0 * angle.cos(), 3000.0 * angle.sin()];
                let spot = TAU * local as f64 / per_district as f64;
                let energy = ["kWh", "GJ", "Gcal", "MWh"][i % 4];
                let flow = ["m3/h", "l/s"][i % 2];
                let temp = ["C", "K"][(i / 2) % 2];
                let electric = ["kWh", "Wh"][(i / 3) % 2];
                FixtureObject {
                    object_id: ObjectId::new(format!("obj-{:02}", i + 1)),
                    device_id: format!("hc-{:02}", i + 1),
                    district,
                    network,
                    position: [center[0] + 400.0 * spot.cos(), center[1] + 400.0 * spot.sin()],
                    heat_scale: 3.0 + 0.7 * i as f64 + 0.3 * noise(config.seed, 1, i as u64, 0),
                    electric_scale: 0.8 + 0.15 * i as f64,
                    units: [
                        (Metric::HeatEnergyKwh, energy),
                        (Metric::FlowM3h, flow),
                        (Metric::SupplyTempC, temp),
                        (Metric::ReturnTempC, temp),
                        (Metric::ElectricKwh, electric),
                    ]
                    .into_iter()
                    .collect(),
                }
            })
            .collect();
        let by_device = objects
            .iter()
            .enumerate()
            .map(|(i, o)| (o.device_id.clone(), i))
            .collect();
        Fixture {
            config,
            objects,
            registry: UnitRegistry::default(),
            by_device,
        }
    }

    pub fn kuznetsk_small() -> Self {
        Fixture::new(FixtureConfig::kuznetsk_small())
    }

    pub fn object_ids(&self) -> Vec<ObjectId> {
        self.objects.iter().map(|o| o.object_id.clone()).collect()
    }

    pub fn district_name(&self, d: usize) -> String {
        match DISTRICT_NAMES.get(d) {
            Some(n) if self.config.districts <= DISTRICT_NAMES.len() => n.to_string(),
            _ => format!("district-{}", d + 1),
        }
    }

    /// Outdoor air temperature in °C: a cold-continental annual cycle with a
    /// daily swing.
    pub fn outdoor_temp(&self, ts: Timestamp) -> f64 {
        let year = (ts - DEFAULT_START) as f64 / YEAR_SECONDS;
        let hour_of_day = ts.rem_euclid(86_400) as f64 / 3600.0;
        -1.5 - 19.0 * (TAU * (year - 0.04)).cos() - 3.0 * (TAU * (hour_of_day - 3.0) / 24.0).cos()
            + 2.0 * noise(self.config.seed, 7, 0, ts / HOUR)
    }

    /// Canonical-unit value of one metric for object index `i`.
    pub fn canonical(&self, i: usize, metric: Metric, ts: Timestamp) -> f64 {
        let o = &self.objects[i];
        let seed = self.config.seed;
        let h = ts.div_euclid(HOUR);
        let hour_of_day = ts.rem_euclid(86_400) as f64 / 3600.0;
        let t_out = self.outdoor_temp(ts);
        let deficit = (18.0 - t_out).max(0.0);
        let n = |m: Metric| noise(seed, 100 + i as u64, metric_ix(m), h);
        let supply = (65.0 + 1.7 * deficit).min(125.0) + 0.5 * n(Metric::SupplyTempC);
        let ret = (40.0 + 0.55 * deficit).min(70.0) + 0.5 * n(Metric::ReturnTempC);
        let profile = (TAU * (hour_of_day - 7.0) / 24.0).cos();
        let heat = o.heat_scale * (deficit + 3.0) * (1.0 + 0.12 * profile) * (1.0 + 0.02 * n(Metric::HeatEnergyKwh));
        match metric {
            Metric::HeatEnergyKwh => heat,
            Metric::SupplyTempC => supply,
            Metric::ReturnTempC => ret,
            Metric::FlowM3h => heat / (1.163 * (supply - ret)),
            Metric::ElectricKwh => {
                let evening = (TAU * (hour_of_day - 19.0) / 24.0).cos();
                (o.electric_scale * (1.0 + 0.4 * evening) + 0.05 * n(Metric::ElectricKwh)).max(0.0)
            }
        }
    }

    /// Value as the device reports it: in its own unit, six decimals.
    pub fn device_value(&self, i: usize, metric: Metric, ts: Timestamp) -> (f64, &'static str) {
        let unit = self.objects[i].units[&metric];
        let def = self.registry.get(unit).expect("fixture units are registered");
        let raw = (self.canonical(i, metric, ts) * def.divisor - def.shift) / def.scale;
        ((raw * 1e6).round() / 1e6, unit)
    }

    pub fn raw_readings(&self, i: usize, ts: Timestamp) -> Vec<RawReading> {
        Metric::ALL
            .iter()
            .map(|&m| {
                let (value, unit) = self.device_value(i, m, ts);
                RawReading {
                    device_id: self.objects[i].device_id.clone(),
                    metric: metric_code(m).into(),
                    ts,
                    value,
                    unit: unit.into(),
                }
            })
            .collect()
    }

    /// Every raw reading of the fixture period, device by device.
    pub fn all_raw(&self) -> Vec<RawReading> {
        let mut out = Vec::with_capacity(self.objects.len() * 5 * self.config.hours as usize);
        for i in 0..self.objects.len() {
            for h in 0..self.config.hours {
                out.extend(self.raw_readings(i, self.config.start_ts + h * HOUR));
            }
        }
        out
    }

    /// Canonical readings of the whole period, without unit round trips.
    pub fn readings(&self) -> Vec<Reading> {
        let mut out = Vec::with_capacity(self.objects.len() * 5 * self.config.hours as usize);
        for (i, o) in self.objects.iter().enumerate() {
            for m in Metric::ALL {
                for h in 0..self.config.hours {
                    let ts = self.config.start_ts + h * HOUR;
                    out.push(Reading {
                        object_id: o.object_id.clone(),
                        metric: m,
                        ts,
                        value: self.canonical(i, m, ts),
                        quality: Quality::Good,
                    });
                }
            }
        }
        out
    }

    /// Hourly outdoor temperature over `[from, to)`.
    pub fn weather(&self, from: Timestamp, to: Timestamp) -> BTreeMap<Timestamp, f64> {
        let first = from + (HOUR - from.rem_euclid(HOUR)) % HOUR;
        (first..to)
            .step_by(HOUR as usize)
            .map(|ts| (ts, self.outdoor_temp(ts)))
            .collect()
    }

    pub fn lonlat(&self, i: usize) -> [f64; 2] {
        let [x, y] = self.objects[i].position;
        let lat = CITY_LONLAT[1] + y / 110_540.0;
        let lon = CITY_LONLAT[0] + x / (111_320.0 * CITY_LONLAT[1].to_radians().cos());
        [(lon * 1e6).round() / 1e6, (lat * 1e6).round() / 1e6]
    }

    pub fn device_map(&self) -> DeviceMap {
        let mut map = DeviceMap::default();
        for (i, o) in self.objects.iter().enumerate() {
            map.insert(o.device_id.clone(), o.object_id.clone(), Some(self.lonlat(i)));
        }
        map
    }

    pub fn network_label(&self, o: &FixtureObject) -> String {
        format!("{}/net-{}", self.district_name(o.district), o.network + 1)
    }

    /// city → district → network → object.
    pub fn hierarchy(&self) -> HierarchyMap {
        HierarchyMap {
            levels: vec!["city".into(), "district".into(), "network".into()],
            paths: self
                .objects
                .iter()
                .map(|o| {
                    (
                        o.object_id.clone(),
                        vec![CITY.to_string(), self.district_name(o.district), self.network_label(o)],
                    )
                })
                .collect(),
        }
    }

    /// One segment per district: coordinator, one router per network, one
    /// end device per heating point. The second network of the first
    /// district hangs off the far end of a 1500 m heat main whose terminals
    /// host repeaters.
    pub fn mesh_config(&self) -> MeshConfig {
        let districts: usize = self.objects.iter().map(|o| o.district + 1).max().unwrap_or(0);
        let mut segments = Vec::new();
        for d in 0..districts.max(1) {
            let coord = format!("coord-{}", d + 1);
            let angle = TAU * d as f64 / self.config.districts.max(1) as f64;
            let center = [3000.0 * angle.cos(), 3000.0 * angle.sin()];
            let mut nodes = Vec::new();
            let members: Vec<&FixtureObject> = self.objects.iter().filter(|o| o.district == d).collect();
            let mut networks: Vec<usize> = members.iter().map(|o| o.network).collect();
            networks.dedup();
            for n in networks {
                let router = format!("rtr-{}-{}", d + 1, n + 1);
                let parent = if d == 0 && n == 1 {
                    "main-1/T1500".to_string()
                } else {
                    coord.clone()
                };
                let net: Vec<&&FixtureObject> = members.iter().filter(|o| o.network == n).collect();
                let cx = net.iter().map(|o| o.position[0]).sum::<f64>() / net.len() as f64;
                let cy = net.iter().map(|o| o.position[1]).sum::<f64>() / net.len() as f64;
                nodes.push(NodeConfig {
                    id: router.clone(),
                    role: Role::Router,
                    parent,
                    position: [cx, cy],
                    wake_offset: 0,
                });
                for o in net {
                    nodes.push(NodeConfig {
                        id: o.device_id.clone(),
                        role: Role::EndDevice,
                        parent: router.clone(),
                        position: o.position,
                        wake_offset: 0,
                    });
                }
            }
            segments.push(SegmentConfig {
                id: self.district_name(d),
                coordinator: coord,
                position: center,
                nodes,
            });
        }
        MeshConfig {
            params: MeshParams {
                epoch: self.config.start_ts,
                seed: self.config.seed,
                ..MeshParams::default()
            },
            segments,
            pipelines: vec![PipelineConfig {
                id: "main-1".into(),
                length: 1500.0,
                spacing: None,
                uplink: "coord-1".into(),
                repeaters: true,
                uninstrumented: vec![],
                bearing: 90.0,
            }],
        }
    }
}

impl SampleSource for Fixture {
    fn sample(&self, device_id: &str, ts: Timestamp) -> Vec<RawReading> {
        match self.by_device.get(device_id) {
            Some(&i) if ts < self.config.end_ts() => self.raw_readings(i, ts),
            _ => Vec::new(),
        }
    }
}
