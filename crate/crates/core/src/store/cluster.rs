//! Simulated storage nodes and replica placement.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: String,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterState {
    pub nodes: Vec<NodeState>,
    pub replication_factor: usize,
    pub store_version: u64,
    pub block_count: usize,
    /// Blocks with at least one replica that is missing or fails its checksum.
    pub under_replicated: usize,
}

impl ClusterState {
    pub fn live_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.alive).count()
    }
}

pub fn node_name(i: usize) -> String {
    format!("node-{i}")
}

fn score(block_id: &str, node: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(block_id.as_bytes());
    h.update([0u8]);
    h.update(node.as_bytes());
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

/// Rendezvous (highest-random-weight) choice of `r` nodes among `candidates`.
/// Returns `None` when fewer than `r` candidates exist.
pub fn rendezvous<'a>(
    block_id: &str,
    candidates: impl IntoIterator<Item = &'a str>,
    r: usize,
) -> Option<Vec<String>> {
    let mut scored: Vec<(u64, &str)> = candidates
        .into_iter()
        .map(|n| (score(block_id, n), n))
        .collect();
    if scored.len() < r {
        return None;
    }
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let mut chosen: Vec<String> = scored[..r].iter().map(|(_, n)| n.to_string()).collect();
    chosen.sort();
    Some(chosen)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    WrongReplicaCount { expected: usize, found: usize },
    DuplicateNode,
    UnknownNode,
    MissingReplica,
    ChecksumMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub block_id: String,
    pub node: Option<String>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub ok: bool,
    pub blocks_checked: usize,
    pub replicas_checked: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    /// Distinct block ids with at least one violation, sorted.
    pub fn violated_blocks(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.violations.iter().map(|v| v.block_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendezvous_is_deterministic_and_distinct() {
        let nodes = ["node-0", "node-1", "node-2", "node-3", "node-4"];
        for i in 0..200 {
            let id = format!("b{i}");
            let a = rendezvous(&id, nodes, 3).unwrap();
            let b = rendezvous(&id, nodes.iter().rev().copied(), 3).unwrap();
            assert_eq!(a, b);
            let mut d = a.clone();
            d.dedup();
            assert_eq!(d.len(), 3);
        }
        assert!(rendezvous("x", ["node-0"], 2).is_none());
    }

    #[test]
    fn removing_an_unchosen_node_keeps_placement() {
        let all = ["node-0", "node-1", "node-2", "node-3"];
        for i in 0..100 {
            let id = format!("blk-{i}");
            let chosen = rendezvous(&id, all, 2).unwrap();
            let other = all.iter().find(|n| !chosen.iter().any(|c| c == *n)).unwrap();
            let rest: Vec<&str> = all.iter().copied().filter(|n| n != other).collect();
            assert_eq!(rendezvous(&id, rest, 2).unwrap(), chosen);
        }
    }
}
