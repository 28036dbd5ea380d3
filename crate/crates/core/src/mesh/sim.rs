//! Discrete-event loop over a built mesh.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::leak::{localize_leak, LeakAlert, LeakEvent};
use super::{Frame, Mesh, Role, Transport, CELLULAR_GATEWAY};
use crate::ingest::RawReading;
use crate::model::Timestamp;

/// Produces the readings an end device takes at one sampling instant.
pub trait SampleSource: Send + Sync {
    fn sample(&self, device_id: &str, ts: Timestamp) -> Vec<RawReading>;
}

impl<F> SampleSource for F
where
    F: Fn(&str, Timestamp) -> Vec<RawReading> + Send + Sync,
{
    fn sample(&self, device_id: &str, ts: Timestamp) -> Vec<RawReading> {
        self(device_id, ts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("cellular fallback is disabled")]
    FallbackDisabled,
    #[error("node `{0}` is reachable over the mesh")]
    Reachable(String),
    #[error("node `{node}` unreachable since {since}, fallback waits until after {until}")]
    TimeoutPending { node: String, since: i64, until: i64 },
    #[error("node `{0}` is down")]
    NodeDown(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshStats {
    pub generated_readings: u64,
    pub mesh_frames: u64,
    pub mesh_readings: u64,
    pub cellular_frames: u64,
    pub cellular_readings: u64,
    /// Accumulated provider charge for cellular frames.
    pub cellular_cost: u64,
    pub lost_transmissions: u64,
}

impl MeshStats {
    pub fn delivered_readings(&self) -> u64 {
        self.mesh_readings + self.cellular_readings
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Fail(String),
    Recover(String),
    Leak(usize),
    Wake(String),
}

#[derive(Debug, Clone, Default)]
struct Runtime {
    alive: bool,
    down_since: Option<i64>,
    buffer: Vec<RawReading>,
    next_sample: i64,
    frame_seq: u64,
    last_window: Option<i64>,
}

pub struct Simulator {
    mesh: Mesh,
    source: Arc<dyn SampleSource>,
    runtime: BTreeMap<String, Runtime>,
    queue: BinaryHeap<Reverse<(i64, Event)>>,
    now: i64,
    rng: ChaCha8Rng,
    stats: MeshStats,
    leaks: Vec<LeakEvent>,
    alerts: Vec<LeakAlert>,
    leak_errors: Vec<(LeakEvent, String)>,
}

impl Simulator {
    pub fn new(mesh: Mesh, source: Arc<dyn SampleSource>) -> Self {
        let mut queue = BinaryHeap::new();
        let runtime = mesh
            .nodes
            .values()
            .map(|n| {
                if n.role == Role::EndDevice {
                    queue.push(Reverse((n.duty_cycle.next_wake(0), Event::Wake(n.node_id.clone()))));
                }
                (
                    n.node_id.clone(),
                    Runtime {
                        alive: true,
                        ..Runtime::default()
                    },
                )
            })
            .collect();
        Simulator {
            rng: ChaCha8Rng::seed_from_u64(mesh.params.seed),
            mesh,
            source,
            runtime,
            queue,
            now: 0,
            stats: MeshStats::default(),
            leaks: Vec::new(),
            alerts: Vec::new(),
            leak_errors: Vec::new(),
        }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn now(&self) -> i64 {
        self.now
    }

    pub fn stats(&self) -> MeshStats {
        self.stats
    }

    /// Readings waiting in device buffers.
    pub fn buffered_readings(&self) -> u64 {
        self.runtime.values().map(|r| r.buffer.len() as u64).sum()
    }

    pub fn buffer(&self, node: &str) -> &[RawReading] {
        self.runtime.get(node).map(|r| r.buffer.as_slice()).unwrap_or(&[])
    }

    pub fn is_alive(&self, node: &str) -> bool {
        self.runtime.get(node).is_some_and(|r| r.alive) && self.mesh.nodes[node].battery > 0
    }

    /// Leak alerts raised so far, newest onset first.
    pub fn alerts(&self) -> Vec<LeakAlert> {
        let mut out = self.alerts.clone();
        out.sort_by(|a, b| b.onset.cmp(&a.onset).then(a.pipeline_id.cmp(&b.pipeline_id)));
        out
    }

    pub fn leak_errors(&self) -> &[(LeakEvent, String)] {
        &self.leak_errors
    }

    fn check_node(&self, node: &str) -> Result<(), SimError> {
        if self.mesh.nodes.contains_key(node) {
            Ok(())
        } else {
            Err(SimError::UnknownNode(node.to_string()))
        }
    }

    pub fn fail_node(&mut self, node: &str, at: i64) -> Result<(), SimError> {
        self.check_node(node)?;
        self.queue.push(Reverse((at, Event::Fail(node.to_string()))));
        Ok(())
    }

    pub fn recover_node(&mut self, node: &str, at: i64) -> Result<(), SimError> {
        self.check_node(node)?;
        self.queue.push(Reverse((at, Event::Recover(node.to_string()))));
        Ok(())
    }

    pub fn inject_leak(&mut self, event: LeakEvent) {
        self.queue.push(Reverse((event.onset, Event::Leak(self.leaks.len()))));
        self.leaks.push(event);
    }

    /// Processes every event strictly before `until`, handing each emitted
    /// frame to `sink` in emission order.
    pub fn run_until(&mut self, until: i64, mut sink: impl FnMut(Frame)) {
        while let Some(Reverse((t, _))) = self.queue.peek() {
            if *t >= until {
                break;
            }
            let Reverse((t, event)) = self.queue.pop().expect("peeked");
            self.now = t;
            match event {
                Event::Fail(node) => self.apply_fail(&node, t),
                Event::Recover(node) => self.apply_recover(&node, t),
                Event::Leak(ix) => self.apply_leak(ix),
                Event::Wake(node) => {
                    if let Some(frame) = self.wake(&node, t) {
                        sink(frame);
                    }
                    let next = t + self.mesh.nodes[&node].duty_cycle.wake_period;
                    self.queue.push(Reverse((next, Event::Wake(node))));
                }
            }
        }
        self.now = self.now.max(until);
        let devices: Vec<String> = self.mesh.end_devices().map(|n| n.node_id.clone()).collect();
        for d in devices {
            self.catch_up(&d, until - 1);
        }
    }

    pub fn run(&mut self, until: i64) -> Vec<Frame> {
        let mut frames = Vec::new();
        self.run_until(until, |f| frames.push(f));
        frames
    }

    /// One collection round at instant `t`: pending failures and leaks up to
    /// `t` are applied, then every end device awake at `t` that has not yet
    /// transmitted in this window emits. Frames come back ordered by source
    /// node id, then frame id.
    pub fn run_round(&mut self, t: i64) -> Vec<Frame> {
        while let Some(Reverse((et, ev))) = self.queue.peek() {
            if *et > t || matches!(ev, Event::Wake(_)) && *et >= t {
                break;
            }
            let Reverse((et, ev)) = self.queue.pop().expect("peeked");
            match ev {
                Event::Fail(node) => self.apply_fail(&node, et),
                Event::Recover(node) => self.apply_recover(&node, et),
                Event::Leak(ix) => self.apply_leak(ix),
                Event::Wake(node) => {
                    // Windows passed over by a manual round are skipped.
                    let next = self.mesh.nodes[&node].duty_cycle.next_wake(t);
                    self.queue.push(Reverse((next.max(et + 1), Event::Wake(node))));
                }
            }
        }
        self.now = t;
        let devices: Vec<String> = self
            .mesh
            .end_devices()
            .filter(|n| n.duty_cycle.is_awake(t))
            .map(|n| n.node_id.clone())
            .collect();
        let mut frames: Vec<Frame> = devices.iter().filter_map(|d| self.wake(d, t)).collect();
        frames.sort_by(|a, b| a.source.cmp(&b.source).then(a.frame_id.cmp(&b.frame_id)));
        frames
    }

    fn catch_up(&mut self, device: &str, through: i64) {
        let interval = self.mesh.params.sample_interval;
        let epoch = self.mesh.params.epoch;
        if !self.is_alive(device) {
            return;
        }
        let rt = self.runtime.get_mut(device).expect("known node");
        while rt.next_sample <= through {
            let readings = self.source.sample(device, epoch + rt.next_sample);
            self.stats.generated_readings += readings.len() as u64;
            rt.buffer.extend(readings);
            rt.next_sample += interval;
        }
    }

    fn mark_down(&mut self, node: &str, t: i64) {
        let rt = self.runtime.get_mut(node).expect("known node");
        rt.down_since.get_or_insert(t);
    }

    fn apply_fail(&mut self, node: &str, t: i64) {
        if self.mesh.nodes[node].role == Role::EndDevice {
            self.catch_up(node, t);
        }
        self.mark_down(node, t);
        self.runtime.get_mut(node).expect("known node").alive = false;
    }

    fn apply_recover(&mut self, node: &str, t: i64) {
        let interval = self.mesh.params.sample_interval;
        let battery = self.mesh.nodes[node].battery;
        let rt = self.runtime.get_mut(node).expect("known node");
        if rt.alive {
            return;
        }
        rt.alive = true;
        if battery > 0 {
            rt.down_since = None;
        }
        let k = (t + interval - 1).div_euclid(interval);
        rt.next_sample = rt.next_sample.max(k * interval);
    }

    fn apply_leak(&mut self, ix: usize) {
        let event = self.leaks[ix].clone();
        match localize_leak(&self.mesh, &event) {
            Ok(location) => self.alerts.push(LeakAlert::new(&event, location, self.now)),
            Err(e) => self.leak_errors.push((event, e.to_string())),
        }
    }

    fn drain(&mut self, node: &str, cost: u64, t: i64) {
        let n = self.mesh.nodes.get_mut(node).expect("known node");
        n.battery = n.battery.saturating_sub(cost);
        if n.battery == 0 {
            self.mark_down(node, t);
        }
    }

    fn next_frame_id(&mut self, node: &str) -> String {
        let rt = self.runtime.get_mut(node).expect("known node");
        rt.frame_seq += 1;
        format!("{node}#{:08}", rt.frame_seq)
    }

    /// Earliest time since which some hop on the route has been down, or
    /// `None` if the route to the coordinator is intact.
    pub fn unreachable_since(&self, node: &str) -> Option<i64> {
        self.mesh
            .route(node)
            .iter()
            .skip(1)
            .filter(|hop| !self.is_alive(hop))
            .filter_map(|hop| self.runtime[hop.as_str()].down_since)
            .min()
    }

    fn wake(&mut self, device: &str, t: i64) -> Option<Frame> {
        let window = self.mesh.nodes[device].duty_cycle.window_index(t)?;
        self.catch_up(device, t);
        let rt = &self.runtime[device];
        if rt.last_window == Some(window) || !self.is_alive(device) {
            return None;
        }
        self.runtime.get_mut(device).expect("known node").last_window = Some(window);

        if self.unreachable_since(device).is_some() {
            if self.runtime[device].buffer.is_empty() {
                return None;
            }
            return self.fallback_to_cellular(device, t).ok();
        }

        let p = self.mesh.params.clone();
        if p.loss_probability > 0.0 && self.rng.random::<f64>() < p.loss_probability {
            self.stats.lost_transmissions += 1;
            self.drain(device, p.tx_cost, t);
            return None;
        }
        let route = self.mesh.route(device);
        self.drain(device, p.tx_cost, t);
        for relay in &route[1..route.len() - 1] {
            self.drain(relay, p.relay_cost, t);
        }
        let payload = std::mem::take(&mut self.runtime.get_mut(device).expect("known node").buffer);
        self.stats.mesh_frames += 1;
        self.stats.mesh_readings += payload.len() as u64;
        self.mesh.nodes.get_mut(device).expect("known node").channel = Transport::Mesh;
        Some(Frame {
            frame_id: self.next_frame_id(device),
            source: device.to_string(),
            payload,
            delivered_at: t + (route.len() as i64 - 1) * p.hop_latency,
            hop_path: route,
            created_at: t,
            transport: Transport::Mesh,
        })
    }

    /// Delivers the node's buffered readings over the cellular network. Only
    /// allowed once the node has been cut off from its coordinator for longer
    /// than the fallback timeout.
    pub fn fallback_to_cellular(&mut self, node: &str, t: i64) -> Result<Frame, SimError> {
        self.check_node(node)?;
        let p = self.mesh.params.clone();
        if !p.fallback_enabled {
            return Err(SimError::FallbackDisabled);
        }
        if !self.is_alive(node) {
            return Err(SimError::NodeDown(node.to_string()));
        }
        let since = self
            .unreachable_since(node)
            .ok_or_else(|| SimError::Reachable(node.to_string()))?;
        if t - since <= p.fallback_timeout {
            return Err(SimError::TimeoutPending {
                node: node.to_string(),
                since,
                until: since + p.fallback_timeout,
            });
        }
        self.drain(node, p.tx_cost, t);
        let payload = std::mem::take(&mut self.runtime.get_mut(node).expect("known node").buffer);
        self.stats.cellular_frames += 1;
        self.stats.cellular_readings += payload.len() as u64;
        self.stats.cellular_cost += p.cellular_frame_cost;
        self.mesh.nodes.get_mut(node).expect("known node").channel = Transport::Cellular;
        Ok(Frame {
            frame_id: self.next_frame_id(node),
            source: node.to_string(),
            payload,
            hop_path: vec![node.to_string(), CELLULAR_GATEWAY.to_string()],
            created_at: t,
            delivered_at: t + p.cellular_latency,
            transport: Transport::Cellular,
        })
    }
}

/// Writes frames as NDJSON, one frame per line.
pub fn write_trace(writer: impl Write, frames: &[Frame]) -> std::io::Result<()> {
    crate::ingest::write_ndjson(writer, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_topology, MeshConfig, MeshParams, NodeConfig, PipelineConfig, SegmentConfig};

    fn source() -> Arc<dyn SampleSource> {
        Arc::new(|device: &str, ts: i64| {
            vec![RawReading {
                device_id: device.to_string(),
                metric: "heat_energy".into(),
                ts,
                value: 1.0,
                unit: "kWh".into(),
            }]
        })
    }

    fn node(id: &str, role: Role, parent: &str) -> NodeConfig {
        NodeConfig {
            id: id.into(),
            role,
            parent: parent.into(),
            position: [0.0, 0.0],
            wake_offset: 0,
        }
    }

    fn cluster(params: MeshParams) -> Mesh {
        build_topology(&MeshConfig {
            params,
            segments: vec![SegmentConfig {
                id: "s".into(),
                coordinator: "c".into(),
                position: [0.0, 0.0],
                nodes: vec![
                    node("r1", Role::Router, "c"),
                    node("r2", Role::Router, "c"),
                    node("e1", Role::EndDevice, "r1"),
                    node("e2", Role::EndDevice, "r1"),
                    node("e3", Role::EndDevice, "r2"),
                ],
            }],
            pipelines: vec![],
        })
        .unwrap()
    }

    #[test]
    fn asleep_round_is_empty() {
        let mut sim = Simulator::new(cluster(MeshParams::default()), source());
        assert!(sim.run_round(450).is_empty());
    }

    #[test]
    fn every_end_device_emits_once_per_window() {
        let mut sim = Simulator::new(cluster(MeshParams::default()), source());
        let frames = sim.run_round(900);
        assert_eq!(frames.len(), 3);
        assert!(sim.run_round(905).is_empty());
        for f in &frames {
            assert_eq!(f.hop_path.len(), 3);
            assert_eq!(f.hop_path.last().unwrap(), "c");
            assert_eq!(f.delivered_at - f.created_at, 2);
        }
    }

    #[test]
    fn repeater_chain_lengthens_route() {
        let mesh = build_topology(&MeshConfig {
            params: MeshParams::default(),
            segments: vec![SegmentConfig {
                id: "s".into(),
                coordinator: "c".into(),
                position: [0.0, 0.0],
                nodes: vec![
                    node("r", Role::Router, "main/T1200"),
                    node("e", Role::EndDevice, "r"),
                ],
            }],
            pipelines: vec![PipelineConfig {
                id: "main".into(),
                length: 1500.0,
                spacing: None,
                uplink: "c".into(),
                repeaters: true,
                uninstrumented: vec![],
                bearing: 0.0,
            }],
        })
        .unwrap();
        let mut sim = Simulator::new(mesh.clone(), source());
        let f = sim.run_round(0).remove(0);
        // e -> r -> T1200 .. T0 (5 repeaters) -> c
        assert_eq!(f.hop_path.len() - 2, 1 + 5);
        for w in f.hop_path.windows(2) {
            assert!(mesh.is_edge(&w[0], &w[1]));
        }
    }

    #[test]
    fn dead_router_descendants_fall_back_after_timeout() {
        let mut sim = Simulator::new(cluster(MeshParams::default()), source());
        sim.fail_node("r1", 1000).unwrap();
        let frames = sim.run(6 * 3600);
        let cellular: Vec<&Frame> = frames.iter().filter(|f| f.transport == Transport::Cellular).collect();
        let mut sources: Vec<&str> = cellular.iter().map(|f| f.source.as_str()).collect();
        sources.sort();
        sources.dedup();
        let expected: Vec<String> = sim
            .mesh()
            .descendants("r1")
            .into_iter()
            .filter(|n| sim.mesh().nodes[n].role == Role::EndDevice)
            .collect();
        assert_eq!(sources, expected);
        for f in &cellular {
            assert!(f.created_at > 1000 + 1800);
            assert_eq!(f.delivered_at - f.created_at, 60);
            assert_eq!(f.hop_path, [f.source.clone(), CELLULAR_GATEWAY.to_string()]);
        }
        assert_eq!(sim.stats().cellular_cost, sim.stats().cellular_frames);
        assert_eq!(
            sim.stats().generated_readings,
            sim.stats().delivered_readings() + sim.buffered_readings()
        );
    }

    #[test]
    fn disabled_fallback_keeps_readings_buffered() {
        let params = MeshParams {
            fallback_enabled: false,
            ..MeshParams::default()
        };
        let mut sim = Simulator::new(cluster(params), source());
        sim.fail_node("r2", 0).unwrap();
        let frames = sim.run(4 * 3600);
        assert!(frames.iter().all(|f| f.source != "e3"));
        assert_eq!(sim.buffer("e3").len(), 4);
        assert_eq!(sim.fallback_to_cellular("e3", 4 * 3600), Err(SimError::FallbackDisabled));
    }

    #[test]
    fn healthy_mesh_refuses_fallback() {
        let mut sim = Simulator::new(cluster(MeshParams::default()), source());
        sim.run(3600);
        assert_eq!(
            sim.fallback_to_cellular("e1", 3600),
            Err(SimError::Reachable("e1".into()))
        );
    }

    #[test]
    fn lossy_channel_is_seeded_and_conserving() {
        let params = MeshParams {
            loss_probability: 0.3,
            seed: 9,
            ..MeshParams::default()
        };
        let run = || {
            let mut sim = Simulator::new(cluster(params.clone()), source());
            let frames = sim.run(2 * 86_400);
            let s = sim.stats();
            assert!(s.lost_transmissions > 0);
            assert_eq!(s.generated_readings, s.delivered_readings() + sim.buffered_readings());
            frames
        };
        assert_eq!(run(), run());
    }
}
