//! Collection medium: duty-cycled cluster-tree segments, repeater chains on
//! heat-main terminals, cellular fallback and leak localization.

pub mod leak;
pub mod sim;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::RawReading;
use crate::model::Timestamp;

pub use self::leak::{localize_leak, LeakAlert, LeakError, LeakEvent, LeakLocation};
pub use self::sim::{MeshStats, SampleSource, Simulator};

pub const CELLULAR_GATEWAY: &str = "cellular-gateway";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Coordinator,
    Router,
    EndDevice,
    Repeater,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Mesh,
    Cellular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DutyCycle {
    pub wake_period: i64,
    pub awake_window: i64,
    /// Phase of the first wake-up.
    #[serde(default)]
    pub offset: i64,
}

impl DutyCycle {
    pub fn is_awake(&self, t: i64) -> bool {
        (t - self.offset).rem_euclid(self.wake_period) < self.awake_window
    }

    /// Index of the wake window containing `t`, if awake.
    pub fn window_index(&self, t: i64) -> Option<i64> {
        self.is_awake(t)
            .then(|| (t - self.offset).div_euclid(self.wake_period))
    }

    /// Start of the first wake window at or after `t`.
    pub fn next_wake(&self, t: i64) -> i64 {
        let k = (t - self.offset).div_euclid(self.wake_period);
        let start = self.offset + k * self.wake_period;
        if start >= t {
            start
        } else {
            start + self.wake_period
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshNode {
    pub node_id: String,
    pub role: Role,
    pub parent: Option<String>,
    /// Planar position in meters.
    pub position: [f64; 2],
    pub duty_cycle: DutyCycle,
    pub battery: u64,
    pub channel: Transport,
    pub segment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub terminal_id: String,
    pub pipeline_pos: f64,
    pub hosts_repeater: bool,
    /// Has a working measurement tap on the ORC wire.
    pub instrumented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub pipeline_id: String,
    pub length: f64,
    pub spacing: f64,
    pub terminals: Vec<Terminal>,
}

impl Pipeline {
    pub fn repeater_id(&self, terminal: &Terminal) -> String {
        format!("{}/{}", self.pipeline_id, terminal.terminal_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: String,
    pub source: String,
    pub payload: Vec<RawReading>,
    pub hop_path: Vec<String>,
    pub created_at: i64,
    pub delivered_at: i64,
    pub transport: Transport,
}

/// Simulation knobs. All durations are simulation seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshParams {
    pub wake_period: i64,
    pub awake_window: i64,
    pub spacing: f64,
    pub fallback_timeout: i64,
    pub cellular_latency: i64,
    pub fallback_enabled: bool,
    pub max_depth: usize,
    pub hop_latency: i64,
    pub sample_interval: i64,
    pub battery: u64,
    pub tx_cost: u64,
    pub relay_cost: u64,
    pub cellular_frame_cost: u64,
    /// Per-transmission loss probability on mesh links; 0 disables loss.
    pub loss_probability: f64,
    pub seed: u64,
    /// Epoch seconds of simulation time zero.
    pub epoch: Timestamp,
}

impl Default for MeshParams {
    fn default() -> Self {
        MeshParams {
            wake_period: 900,
            awake_window: 10,
            spacing: 300.0,
            fallback_timeout: 1800,
            cellular_latency: 60,
            fallback_enabled: true,
            max_depth: 5,
            hop_latency: 1,
            sample_interval: 3600,
            battery: 100_000_000,
            tx_cost: 2,
            relay_cost: 1,
            cellular_frame_cost: 1,
            loss_probability: 0.0,
            seed: 0,
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub id: String,
    pub role: Role,
    pub parent: String,
    #[serde(default)]
    pub position: [f64; 2],
    #[serde(default)]
    pub wake_offset: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub id: String,
    pub coordinator: String,
    #[serde(default)]
    pub position: [f64; 2],
    #[serde(default)]
    pub nodes: Vec<NodeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub id: String,
    pub length: f64,
    /// Overrides the mesh-wide terminal spacing.
    #[serde(default)]
    pub spacing: Option<f64>,
    /// Node the repeater at position 0 attaches to.
    pub uplink: String,
    #[serde(default = "yes")]
    pub repeaters: bool,
    /// Terminal positions without a measurement tap.
    #[serde(default)]
    pub uninstrumented: Vec<f64>,
    /// Bearing of the pipeline in degrees from the x axis.
    #[serde(default)]
    pub bearing: f64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    #[serde(default)]
    pub params: MeshParams,
    pub segments: Vec<SegmentConfig>,
    #[serde(default)]
    pub pipelines: Vec<PipelineConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("no segments configured")]
    NoSegments,
    #[error("parent links form a cycle through `{0}`")]
    CyclicParentage(String),
    #[error("node `{0}` has no reachable coordinator")]
    OrphanNode(String),
    #[error("pipeline `{pipeline}`: length {length} is not a positive multiple of spacing {spacing}")]
    BadSpacing {
        pipeline: String,
        length: String,
        spacing: String,
    },
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("node `{0}` declares a role that must come from the segment or pipeline table")]
    InvalidRole(String),
    #[error("node `{node}` cannot use end device `{parent}` as parent")]
    EndDeviceParent { node: String, parent: String },
    #[error("node `{node}` is {depth} levels deep, above the limit of {max}")]
    DepthExceeded { node: String, depth: usize, max: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// A built, validated topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub params: MeshParams,
    pub nodes: BTreeMap<String, MeshNode>,
    pub pipelines: BTreeMap<String, Pipeline>,
}

impl Mesh {
    pub fn node(&self, id: &str) -> Option<&MeshNode> {
        self.nodes.get(id)
    }

    pub fn end_devices(&self) -> impl Iterator<Item = &MeshNode> {
        self.nodes.values().filter(|n| n.role == Role::EndDevice)
    }

    pub fn coordinators(&self) -> impl Iterator<Item = &MeshNode> {
        self.nodes.values().filter(|n| n.role == Role::Coordinator)
    }

    /// Path from `id` up to its coordinator, inclusive at both ends.
    pub fn route(&self, id: &str) -> Vec<String> {
        let mut path = vec![id.to_string()];
        let mut cur = self.nodes.get(id);
        while let Some(parent) = cur.and_then(|n| n.parent.as_ref()) {
            path.push(parent.clone());
            cur = self.nodes.get(parent);
        }
        path
    }

    /// Tree depth, not counting repeaters.
    pub fn depth(&self, id: &str) -> usize {
        self.route(id)
            .iter()
            .skip(1)
            .filter(|n| self.nodes[n.as_str()].role != Role::Repeater)
            .count()
    }

    pub fn repeater_hops(&self, id: &str) -> usize {
        self.route(id)
            .iter()
            .filter(|n| self.nodes[n.as_str()].role == Role::Repeater)
            .count()
    }

    /// All nodes whose route passes through `id`, excluding `id` itself.
    pub fn descendants(&self, id: &str) -> BTreeSet<String> {
        self.nodes
            .keys()
            .filter(|n| n.as_str() != id && self.route(n).iter().any(|h| h == id))
            .cloned()
            .collect()
    }

    /// Whether `a` and `b` are joined by a parent link.
    pub fn is_edge(&self, a: &str, b: &str) -> bool {
        let parent_of = |x: &str| self.nodes.get(x).and_then(|n| n.parent.as_deref());
        parent_of(a) == Some(b) || parent_of(b) == Some(a)
    }
}

fn terminal_id(pos: f64) -> String {
    if pos.fract() == 0.0 {
        format!("T{}", pos as i64)
    } else {
        format!("T{pos}")
    }
}

fn multiple_of(length: f64, spacing: f64) -> Option<usize> {
    if !(length > 0.0 && spacing > 0.0) {
        return None;
    }
    let n = (length / spacing).round();
    ((n * spacing - length).abs() <= 1e-9 * length.max(1.0) && n >= 1.0).then_some(n as usize)
}

/// Builds the topology. The result is a pure function of `config`.
pub fn build_topology(config: &MeshConfig) -> Result<Mesh, TopologyError> {
    let p = &config.params;
    if p.wake_period <= 0 || p.awake_window <= 0 || p.awake_window > p.wake_period {
        return Err(TopologyError::InvalidParams(
            "wake_period and awake_window must satisfy 0 < awake_window <= wake_period".into(),
        ));
    }
    if p.sample_interval <= 0 || p.hop_latency < 0 || p.cellular_latency < 0 {
        return Err(TopologyError::InvalidParams(
            "sample_interval must be positive and latencies non-negative".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p.loss_probability) {
        return Err(TopologyError::InvalidParams("loss_probability outside [0, 1]".into()));
    }
    if config.segments.is_empty() {
        return Err(TopologyError::NoSegments);
    }

    let always_on = DutyCycle {
        wake_period: p.wake_period,
        awake_window: p.wake_period,
        offset: 0,
    };
    let mut nodes: BTreeMap<String, MeshNode> = BTreeMap::new();
    let mut insert = |node: MeshNode| -> Result<(), TopologyError> {
        if nodes.contains_key(&node.node_id) {
            return Err(TopologyError::DuplicateNode(node.node_id));
        }
        nodes.insert(node.node_id.clone(), node);
        Ok(())
    };

    for seg in &config.segments {
        insert(MeshNode {
            node_id: seg.coordinator.clone(),
            role: Role::Coordinator,
            parent: None,
            position: seg.position,
            duty_cycle: always_on,
            battery: p.battery,
            channel: Transport::Mesh,
            segment: seg.id.clone(),
        })?;
        for n in &seg.nodes {
            let duty_cycle = match n.role {
                Role::Router => always_on,
                Role::EndDevice => DutyCycle {
                    wake_period: p.wake_period,
                    awake_window: p.awake_window,
                    offset: n.wake_offset.rem_euclid(p.wake_period),
                },
                Role::Coordinator | Role::Repeater => {
                    return Err(TopologyError::InvalidRole(n.id.clone()))
                }
            };
            insert(MeshNode {
                node_id: n.id.clone(),
                role: n.role,
                parent: Some(n.parent.clone()),
                position: n.position,
                duty_cycle,
                battery: p.battery,
                channel: Transport::Mesh,
                segment: seg.id.clone(),
            })?;
        }
    }

    let mut pipelines = BTreeMap::new();
    for pc in &config.pipelines {
        let spacing = pc.spacing.unwrap_or(p.spacing);
        let count = multiple_of(pc.length, spacing).ok_or_else(|| TopologyError::BadSpacing {
            pipeline: pc.id.clone(),
            length: pc.length.to_string(),
            spacing: spacing.to_string(),
        })?;
        let terminals: Vec<Terminal> = (0..=count)
            .map(|i| {
                let pos = i as f64 * spacing;
                Terminal {
                    terminal_id: terminal_id(pos),
                    pipeline_pos: pos,
                    hosts_repeater: pc.repeaters,
                    instrumented: !pc.uninstrumented.iter().any(|u| (u - pos).abs() < 1e-9),
                }
            })
            .collect();
        let pipeline = Pipeline {
            pipeline_id: pc.id.clone(),
            length: pc.length,
            spacing,
            terminals,
        };
        if pc.repeaters {
            let (origin, segment) = match config
                .segments
                .iter()
                .find_map(|s| {
                    if s.coordinator == pc.uplink {
                        Some((s.position, s.id.clone()))
                    } else {
                        s.nodes
                            .iter()
                            .find(|n| n.id == pc.uplink)
                            .map(|n| (n.position, s.id.clone()))
                    }
                }) {
                Some(found) => found,
                None => return Err(TopologyError::OrphanNode(pc.uplink.clone())),
            };
            let (sin, cos) = pc.bearing.to_radians().sin_cos();
            let mut parent = pc.uplink.clone();
            for t in &pipeline.terminals {
                let id = pipeline.repeater_id(t);
                insert(MeshNode {
                    node_id: id.clone(),
                    role: Role::Repeater,
                    parent: Some(parent),
                    position: [origin[0] + t.pipeline_pos * cos, origin[1] + t.pipeline_pos * sin],
                    duty_cycle: always_on,
                    battery: p.battery,
                    channel: Transport::Mesh,
                    segment: segment.clone(),
                })?;
                parent = id;
            }
        }
        pipelines.insert(pc.id.clone(), pipeline);
    }

    // Parent validation: every walk ends at a coordinator without revisiting.
    for id in nodes.keys() {
        let mut seen = BTreeSet::new();
        let mut cur = id.as_str();
        loop {
            if !seen.insert(cur) {
                return Err(TopologyError::CyclicParentage(cur.to_string()));
            }
            let node = &nodes[cur];
            match &node.parent {
                None => break,
                Some(parent) => match nodes.get(parent) {
                    None => return Err(TopologyError::OrphanNode(id.clone())),
                    Some(pn) if pn.role == Role::EndDevice => {
                        return Err(TopologyError::EndDeviceParent {
                            node: cur.to_string(),
                            parent: parent.clone(),
                        })
                    }
                    Some(_) => cur = parent,
                },
            }
        }
        if nodes[cur].role != Role::Coordinator {
            return Err(TopologyError::OrphanNode(id.clone()));
        }
    }

    let mesh = Mesh {
        params: p.clone(),
        nodes,
        pipelines,
    };
    for id in mesh.nodes.keys() {
        let depth = mesh.depth(id);
        if depth > p.max_depth {
            return Err(TopologyError::DepthExceeded {
                node: id.clone(),
                depth,
                max: p.max_depth,
            });
        }
    }
    Ok(mesh)
}
