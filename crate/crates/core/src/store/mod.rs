//! Append-only multidimensional fact store with a cached-slice layer.
//!
//! Facts are keyed by `(object, metric, ts)` and never change once written.
//! Every append is packed into checksummed blocks and placed on `r` storage
//! nodes by rendezvous hashing. Queries go through an exact-spec slice cache
//! that is invalidated by appends into overlapping windows, so a cached
//! answer is always identical to a fresh recomputation.

pub mod cache;
pub mod cluster;
pub mod codec;
mod disk;
pub mod slice;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{MetricKey, ObjectId, Quality, Timestamp, Window};

use self::cache::{SliceCache, DEFAULT_CACHE_CAPACITY};
use self::cluster::{node_name, rendezvous, AuditReport, ClusterState, NodeState, Violation, ViolationKind};
use self::codec::{pack, pack_bytes, Record, DEFAULT_BLOCK_SIZE_LIMIT};
use self::disk::{ClusterFile, DiskLayout, CLUSTER_MAGIC};
use self::slice::{compute_cells, StoredFact, Streams};

pub use self::codec::{Block, Cell};
pub use self::slice::{Agg, Grain, ObjectSel, Slice, SliceSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("key conflict at {object_id}/{metric}@{ts}: a different value is already stored")]
    KeyConflict {
        object_id: ObjectId,
        metric: MetricKey,
        ts: Timestamp,
    },
    #[error("quorum unavailable: {0}")]
    QuorumUnavailable(String),
    #[error("checksum mismatch in block {block_id}")]
    ChecksumMismatch { block_id: String },
    #[error("invalid slice spec: {0}")]
    InvalidSpec(String),
    #[error("unknown storage node `{0}`")]
    UnknownNode(String),
    #[error("store unavailable: {0}")]
    Io(String),
    #[error("corrupt store data: {0}")]
    Corrupt(String),
    #[error("invalid store configuration: {0}")]
    Config(String),
}

impl StoreError {
    /// Errors a caller may reasonably retry after the cluster heals.
    pub fn is_retryable(&self) -> bool {
        matches!(self, StoreError::QuorumUnavailable(_) | StoreError::Io(_))
    }
}

/// One immutable fact row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactRecord {
    pub object_id: ObjectId,
    pub metric: MetricKey,
    pub ts: Timestamp,
    #[serde(with = "crate::model::nan_as_null")]
    pub value: f64,
    pub quality: Quality,
}

impl FactRecord {
    fn same_payload(&self, stored: &StoredFact) -> bool {
        self.value.to_bits() == stored.value.to_bits() && self.quality == stored.quality
    }
}

impl Record for FactRecord {
    fn encode(&self, out: &mut Vec<u8>) {
        codec::put_str(out, self.object_id.as_str());
        codec::put_str(out, &self.metric.to_string());
        out.extend_from_slice(&self.ts.to_le_bytes());
        out.extend_from_slice(&self.value.to_bits().to_le_bytes());
        out.push(self.quality.code());
    }

    fn decode(input: &mut &[u8]) -> Option<Self> {
        Some(FactRecord {
            object_id: ObjectId(codec::get_str(input)?),
            metric: codec::get_metric(input)?,
            ts: codec::get_i64(input)?,
            value: codec::get_f64(input)?,
            quality: Quality::from_code(codec::get_u8(input)?)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreConfig {
    pub nodes: usize,
    pub replication: usize,
    pub block_size_limit: usize,
    pub cache_capacity_bytes: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            nodes: 3,
            replication: 2,
            block_size_limit: DEFAULT_BLOCK_SIZE_LIMIT,
            cache_capacity_bytes: DEFAULT_CACHE_CAPACITY,
        }
    }
}

impl StoreConfig {
    fn validate(&self) -> Result<(), StoreError> {
        if self.replication == 0 || self.replication > self.nodes {
            return Err(StoreError::Config(format!(
                "replication factor {} must be in 1..={}",
                self.replication, self.nodes
            )));
        }
        if self.block_size_limit == 0 {
            return Err(StoreError::Config("block size limit must be positive".into()));
        }
        Ok(())
    }
}

/// Key range of one stream that falls (at least partly) inside a block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRange {
    pub object_id: ObjectId,
    pub metric: MetricKey,
    pub first_ts: Timestamp,
    pub last_ts: Timestamp,
}

/// Catalog entry of one fact block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub block_id: String,
    pub version: u64,
    pub seq: usize,
    pub byte_len: usize,
    pub checksum: u32,
    pub placement: Vec<String>,
    pub coverage: Vec<StreamRange>,
}

impl BlockMeta {
    /// Whether a query for `spec` has to read this block.
    pub fn touches(&self, spec: &SliceSpec) -> bool {
        self.coverage.iter().any(|r| {
            spec.objects.matches(&r.object_id)
                && spec.metrics.contains(&r.metric)
                && r.first_ts < spec.window.to
                && spec.window.from <= r.last_ts
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendReceipt {
    /// Records newly written (records already stored with identical payload
    /// are not counted).
    pub records: usize,
    pub store_version: u64,
    /// Newest timestamp stored per object touched by this append.
    pub high_water: BTreeMap<ObjectId, Timestamp>,
    pub blocks: Vec<String>,
    pub cache_invalidated: usize,
    /// The batch id had already been immersed; nothing was written.
    pub duplicate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
    pub bytes: usize,
}

struct StorageNode {
    id: String,
    alive: bool,
    /// Replica payloads for in-memory stores; unused when disk-backed.
    blocks: BTreeMap<String, Vec<u8>>,
}

struct State {
    streams: Streams,
    catalog: Vec<BlockMeta>,
    /// Per stream: `(first_ts, last_ts, catalog index)`.
    stream_blocks: BTreeMap<(ObjectId, MetricKey), Vec<(Timestamp, Timestamp, usize)>>,
    nodes: Vec<StorageNode>,
    version: u64,
    batches: BTreeSet<String>,
}

impl State {
    fn index_block(&mut self, idx: usize) {
        let meta = &self.catalog[idx];
        for r in &meta.coverage {
            self.stream_blocks
                .entry((r.object_id.clone(), r.metric.clone()))
                .or_default()
                .push((r.first_ts, r.last_ts, idx));
        }
    }

    fn node(&self, id: &str) -> Option<&StorageNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    fn is_alive(&self, id: &str) -> bool {
        self.node(id).is_some_and(|n| n.alive)
    }

    fn cluster_file(&self, config: &StoreConfig) -> ClusterFile {
        ClusterFile {
            magic: CLUSTER_MAGIC.to_string(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeState {
                    id: n.id.clone(),
                    alive: n.alive,
                })
                .collect(),
            replication_factor: config.replication,
            block_size_limit: config.block_size_limit,
            store_version: self.version,
        }
    }
}

pub struct CubeStore {
    config: StoreConfig,
    disk: Option<DiskLayout>,
    state: RwLock<State>,
    cache: Mutex<SliceCache>,
}

impl std::fmt::Debug for CubeStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CubeStore")
            .field("config", &self.config)
            .field("path", &self.disk.as_ref().map(DiskLayout::root))
            .field("version", &self.version())
            .finish()
    }
}

fn empty_state(config: &StoreConfig) -> State {
    State {
        streams: BTreeMap::new(),
        catalog: Vec::new(),
        stream_blocks: BTreeMap::new(),
        nodes: (0..config.nodes)
            .map(|i| StorageNode {
                id: node_name(i),
                alive: true,
                blocks: BTreeMap::new(),
            })
            .collect(),
        version: 0,
        batches: BTreeSet::new(),
    }
}

fn slice_block_prefix(spec: &SliceSpec) -> String {
    let json = serde_json::to_vec(spec).expect("slice spec serializes");
    let digest = Sha256::digest(&json);
    format!("s{}", hex::encode(&digest[..8]))
}

impl CubeStore {
    pub fn in_memory(config: StoreConfig) -> Result<Self, StoreError> {
        config.validate()?;
        Ok(CubeStore {
            state: RwLock::new(empty_state(&config)),
            cache: Mutex::new(SliceCache::new(config.cache_capacity_bytes)),
            config,
            disk: None,
        })
    }

    /// Whether a store has been created at `path`.
    pub fn exists(path: impl Into<PathBuf>) -> bool {
        DiskLayout::new(path).exists()
    }

    /// Opens the store at `path`, creating it with `config` if absent. For an
    /// existing store the node set, replication factor and block size come
    /// from disk; only the cache capacity is taken from `config`.
    pub fn open(path: impl Into<PathBuf>, config: StoreConfig) -> Result<Self, StoreError> {
        let disk = DiskLayout::new(path);
        if !disk.exists() {
            config.validate()?;
            let state = empty_state(&config);
            disk.create(&state.cluster_file(&config))?;
            return Ok(CubeStore {
                state: RwLock::new(state),
                cache: Mutex::new(SliceCache::new(config.cache_capacity_bytes)),
                config,
                disk: Some(disk),
            });
        }
        let cluster = disk.read_cluster()?;
        let config = StoreConfig {
            nodes: cluster.nodes.len(),
            replication: cluster.replication_factor,
            block_size_limit: cluster.block_size_limit,
            cache_capacity_bytes: config.cache_capacity_bytes,
        };
        config.validate()?;
        let mut state = empty_state(&config);
        state.nodes = cluster
            .nodes
            .iter()
            .map(|n| StorageNode {
                id: n.id.clone(),
                alive: n.alive,
                blocks: BTreeMap::new(),
            })
            .collect();
        state.version = cluster.store_version;
        state.batches = disk.read_batches()?.into_iter().collect();
        state.catalog = disk.read_catalog()?;
        let mut by_version: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, meta) in state.catalog.iter().enumerate() {
            by_version.entry(meta.version).or_default().push(i);
        }
        for (version, idxs) in by_version {
            let mut bytes = Vec::new();
            for &i in &idxs {
                let meta = &state.catalog[i];
                let payload = meta
                    .placement
                    .iter()
                    .filter_map(|n| disk.read_replica(n, &meta.block_id))
                    .find(|p| p.len() == meta.byte_len && crc32fast::hash(p) == meta.checksum)
                    .ok_or_else(|| StoreError::ChecksumMismatch {
                        block_id: meta.block_id.clone(),
                    })?;
                bytes.extend_from_slice(&payload);
            }
            for rec in codec::decode_all::<FactRecord>(&bytes)? {
                state
                    .streams
                    .entry((rec.object_id, rec.metric))
                    .or_default()
                    .insert(
                        rec.ts,
                        StoredFact {
                            value: rec.value,
                            quality: rec.quality,
                            version,
                        },
                    );
            }
        }
        for i in 0..state.catalog.len() {
            state.index_block(i);
        }
        Ok(CubeStore {
            state: RwLock::new(state),
            cache: Mutex::new(SliceCache::new(config.cache_capacity_bytes)),
            config,
            disk: Some(disk),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn path(&self) -> Option<&Path> {
        self.disk.as_ref().map(DiskLayout::root)
    }

    pub fn version(&self) -> u64 {
        self.state.read().version
    }

    /// Appends facts. All-or-nothing: a conflicting key anywhere rejects the
    /// whole call. Facts already stored with an identical payload are skipped.
    pub fn append(&self, records: Vec<FactRecord>) -> Result<AppendReceipt, StoreError> {
        let mut state = self.state.write();
        self.append_locked(&mut state, records)
    }

    /// Appends a named batch exactly once; repeating a batch id is a no-op.
    pub fn append_batch(
        &self,
        batch_id: &str,
        records: Vec<FactRecord>,
    ) -> Result<AppendReceipt, StoreError> {
        let mut state = self.state.write();
        if state.batches.contains(batch_id) {
            return Ok(AppendReceipt {
                records: 0,
                store_version: state.version,
                high_water: BTreeMap::new(),
                blocks: Vec::new(),
                cache_invalidated: 0,
                duplicate: true,
            });
        }
        let receipt = self.append_locked(&mut state, records)?;
        if let Some(disk) = &self.disk {
            disk.append_batch(batch_id)?;
        }
        state.batches.insert(batch_id.to_string());
        Ok(receipt)
    }

    pub fn has_batch(&self, batch_id: &str) -> bool {
        self.state.read().batches.contains(batch_id)
    }

    fn append_locked(
        &self,
        state: &mut State,
        mut records: Vec<FactRecord>,
    ) -> Result<AppendReceipt, StoreError> {
        records.sort_by(|a, b| {
            (&a.object_id, &a.metric, a.ts).cmp(&(&b.object_id, &b.metric, b.ts))
        });
        let mut fresh: Vec<FactRecord> = Vec::with_capacity(records.len());
        for rec in records {
            if let Some(prev) = fresh.last() {
                if prev.object_id == rec.object_id && prev.metric == rec.metric && prev.ts == rec.ts {
                    if prev.value.to_bits() != rec.value.to_bits() || prev.quality != rec.quality {
                        return Err(StoreError::KeyConflict {
                            object_id: rec.object_id,
                            metric: rec.metric,
                            ts: rec.ts,
                        });
                    }
                    continue;
                }
            }
            let existing = state
                .streams
                .get(&(rec.object_id.clone(), rec.metric.clone()))
                .and_then(|s| s.get(&rec.ts));
            match existing {
                Some(stored) if rec.same_payload(stored) => {}
                Some(_) => {
                    return Err(StoreError::KeyConflict {
                        object_id: rec.object_id,
                        metric: rec.metric,
                        ts: rec.ts,
                    })
                }
                None => fresh.push(rec),
            }
        }

        let live: Vec<String> = state
            .nodes
            .iter()
            .filter(|n| n.alive)
            .map(|n| n.id.clone())
            .collect();
        if !fresh.is_empty() && live.len() < self.config.replication {
            return Err(StoreError::QuorumUnavailable(format!(
                "{} live nodes, replication factor {}",
                live.len(),
                self.config.replication
            )));
        }

        let version = state.version + 1;
        let mut block_ids = Vec::new();
        let mut new_metas = Vec::new();
        if !fresh.is_empty() {
            let limit = self.config.block_size_limit;
            let mut bytes = Vec::new();
            let mut spans = Vec::with_capacity(fresh.len());
            for rec in &fresh {
                let start = bytes.len();
                rec.encode(&mut bytes);
                spans.push((start, bytes.len()));
            }
            let blocks = pack_bytes(&bytes, limit, &format!("f{version:010}"));
            let mut coverage: Vec<Vec<StreamRange>> = vec![Vec::new(); blocks.len()];
            for (rec, &(start, end)) in fresh.iter().zip(&spans) {
                for cov in &mut coverage[start / limit..=(end - 1) / limit] {
                    match cov.last_mut() {
                        Some(r) if r.object_id == rec.object_id && r.metric == rec.metric => {
                            r.last_ts = rec.ts
                        }
                        _ => cov.push(StreamRange {
                            object_id: rec.object_id.clone(),
                            metric: rec.metric.clone(),
                            first_ts: rec.ts,
                            last_ts: rec.ts,
                        }),
                    }
                }
            }
            for (seq, (block, coverage)) in blocks.into_iter().zip(coverage).enumerate() {
                let placement = rendezvous(
                    &block.block_id,
                    live.iter().map(String::as_str),
                    self.config.replication,
                )
                .expect("live node count checked above");
                for node in &placement {
                    match &self.disk {
                        Some(disk) => disk.write_replica(node, &block.block_id, &block.payload)?,
                        None => {
                            let n = state.nodes.iter_mut().find(|n| &n.id == node).unwrap();
                            n.blocks.insert(block.block_id.clone(), block.payload.clone());
                        }
                    }
                }
                block_ids.push(block.block_id.clone());
                new_metas.push(BlockMeta {
                    block_id: block.block_id,
                    version,
                    seq,
                    byte_len: block.byte_len,
                    checksum: block.checksum,
                    placement,
                    coverage,
                });
            }
            if let Some(disk) = &self.disk {
                for meta in &new_metas {
                    disk.append_catalog(meta)?;
                }
            }
        }

        // Commit to memory.
        state.version = version;
        for meta in new_metas {
            state.catalog.push(meta);
            let idx = state.catalog.len() - 1;
            state.index_block(idx);
        }
        let mut touched: BTreeSet<ObjectId> = BTreeSet::new();
        let mut span: Option<Window> = None;
        for rec in &fresh {
            touched.insert(rec.object_id.clone());
            span = Some(match span {
                None => Window::new(rec.ts, rec.ts + 1),
                Some(w) => Window::new(w.from.min(rec.ts), w.to.max(rec.ts + 1)),
            });
            state
                .streams
                .entry((rec.object_id.clone(), rec.metric.clone()))
                .or_default()
                .insert(
                    rec.ts,
                    StoredFact {
                        value: rec.value,
                        quality: rec.quality,
                        version,
                    },
                );
        }
        if let Some(disk) = &self.disk {
            disk.write_cluster(&state.cluster_file(&self.config))?;
        }
        let cache_invalidated = match span {
            Some(w) => self.cache.lock().invalidate(&touched, &w),
            None => 0,
        };
        let high_water = touched
            .iter()
            .filter_map(|o| {
                state
                    .streams
                    .iter()
                    .filter(|((obj, _), _)| obj == o)
                    .filter_map(|(_, s)| s.keys().next_back().copied())
                    .max()
                    .map(|ts| (o.clone(), ts))
            })
            .collect();
        log::debug!(
            "append v{version}: {} records, {} blocks, {cache_invalidated} cached slices dropped",
            fresh.len(),
            block_ids.len()
        );
        Ok(AppendReceipt {
            records: fresh.len(),
            store_version: version,
            high_water,
            blocks: block_ids,
            cache_invalidated,
            duplicate: false,
        })
    }

    fn check_available(&self, state: &State, spec: &SliceSpec) -> Result<(), StoreError> {
        for ((object, metric), ranges) in &state.stream_blocks {
            if !spec.objects.matches(object) || !spec.metrics.contains(metric) {
                continue;
            }
            for &(first, last, idx) in ranges {
                if first >= spec.window.to || last < spec.window.from {
                    continue;
                }
                let meta = &state.catalog[idx];
                if !meta.placement.iter().any(|n| state.is_alive(n)) {
                    return Err(StoreError::QuorumUnavailable(format!(
                        "every replica of block {} is on a failed node",
                        meta.block_id
                    )));
                }
            }
        }
        Ok(())
    }

    fn build_slice(&self, state: &State, spec: &SliceSpec) -> Slice {
        let (cells, version) = compute_cells(&state.streams, spec);
        let blocks = pack(&cells, self.config.block_size_limit, &slice_block_prefix(&spec.cache_key()));
        Slice {
            spec: spec.clone(),
            cells,
            blocks,
            version,
        }
    }

    /// Answers a multidimensional query. The cache is consulted first and
    /// populated on a miss.
    pub fn query_slice(&self, spec: &SliceSpec) -> Result<Slice, StoreError> {
        spec.validate()?;
        let state = self.state.read();
        self.check_available(&state, spec)?;
        let key = spec.cache_key();
        if let Some(hit) = self.cache.lock().get(&key) {
            let mut slice = (*hit).clone();
            slice.spec = spec.clone();
            return Ok(slice);
        }
        let slice = self.build_slice(&state, spec);
        // Inserted while the read guard is held, so no append can slip in
        // between computation and caching.
        self.cache.lock().insert(key, Arc::new(slice.clone()));
        Ok(slice)
    }

    /// Same answer as [`query_slice`](Self::query_slice) without touching the
    /// cache.
    pub fn query_slice_uncached(&self, spec: &SliceSpec) -> Result<Slice, StoreError> {
        spec.validate()?;
        let state = self.state.read();
        self.check_available(&state, spec)?;
        Ok(self.build_slice(&state, spec))
    }

    /// Drops cached slices overlapping `objects × window`. Appends call this
    /// automatically.
    pub fn invalidate_cache(&self, objects: &BTreeSet<ObjectId>, window: &Window) -> usize {
        self.cache.lock().invalidate(objects, window)
    }

    pub fn clear_cache(&self) {
        self.cache.lock().clear();
    }

    pub fn cached_specs(&self) -> Vec<SliceSpec> {
        self.cache.lock().keys()
    }

    pub fn cache_stats(&self) -> CacheStats {
        let c = self.cache.lock();
        CacheStats {
            hits: c.hits,
            misses: c.misses,
            entries: c.len(),
            bytes: c.bytes(),
        }
    }

    /// Raw fact rows matching the selection, ordered by key.
    pub fn facts(&self, objects: &ObjectSel, metrics: &BTreeSet<MetricKey>, window: Window) -> Vec<FactRecord> {
        let state = self.state.read();
        let mut out = Vec::new();
        for ((object, metric), facts) in &state.streams {
            if !objects.matches(object) || !metrics.contains(metric) {
                continue;
            }
            for (&ts, f) in facts.range(window.from..window.to) {
                out.push(FactRecord {
                    object_id: object.clone(),
                    metric: metric.clone(),
                    ts,
                    value: f.value,
                    quality: f.quality,
                });
            }
        }
        out
    }

    pub fn objects(&self) -> BTreeSet<ObjectId> {
        self.state.read().streams.keys().map(|(o, _)| o.clone()).collect()
    }

    pub fn metric_keys(&self) -> BTreeSet<MetricKey> {
        self.state.read().streams.keys().map(|(_, m)| m.clone()).collect()
    }

    pub fn has_stream(&self, object: &ObjectId, metric: &MetricKey) -> bool {
        self.state
            .read()
            .streams
            .contains_key(&(object.clone(), metric.clone()))
    }

    /// Timestamp span `[first, last]` of one stream.
    pub fn stream_span(&self, object: &ObjectId, metric: &MetricKey) -> Option<(Timestamp, Timestamp)> {
        let state = self.state.read();
        let s = state.streams.get(&(object.clone(), metric.clone()))?;
        Some((*s.keys().next()?, *s.keys().next_back()?))
    }

    pub fn fact_count(&self) -> usize {
        self.state.read().streams.values().map(BTreeMap::len).sum()
    }

    pub fn block_catalog(&self) -> Vec<BlockMeta> {
        self.state.read().catalog.clone()
    }

    pub fn cluster_state(&self) -> ClusterState {
        let state = self.state.read();
        self.cluster_state_locked(&state)
    }

    fn cluster_state_locked(&self, state: &State) -> ClusterState {
        let under_replicated = state
            .catalog
            .iter()
            .filter(|m| m.placement.iter().any(|n| !self.replica_ok(state, n, m)))
            .count();
        ClusterState {
            nodes: state
                .nodes
                .iter()
                .map(|n| NodeState {
                    id: n.id.clone(),
                    alive: n.alive,
                })
                .collect(),
            replication_factor: self.config.replication,
            store_version: state.version,
            block_count: state.catalog.len(),
            under_replicated,
        }
    }

    fn read_replica(&self, state: &State, node: &str, block_id: &str) -> Option<Vec<u8>> {
        match &self.disk {
            Some(disk) => disk.read_replica(node, block_id),
            None => state.node(node)?.blocks.get(block_id).cloned(),
        }
    }

    fn replica_ok(&self, state: &State, node: &str, meta: &BlockMeta) -> bool {
        self.read_replica(state, node, &meta.block_id)
            .is_some_and(|p| p.len() == meta.byte_len && crc32fast::hash(&p) == meta.checksum)
    }

    fn set_alive(&self, node: &str, alive: bool) -> Result<(), StoreError> {
        let mut state = self.state.write();
        let n = state
            .nodes
            .iter_mut()
            .find(|n| n.id == node)
            .ok_or_else(|| StoreError::UnknownNode(node.to_string()))?;
        n.alive = alive;
        if let Some(disk) = &self.disk {
            disk.write_cluster(&state.cluster_file(&self.config))?;
        }
        Ok(())
    }

    /// Marks a storage node failed. Its replicas stay where they are but are
    /// not readable until recovery.
    pub fn fail_node(&self, node: &str) -> Result<ClusterState, StoreError> {
        self.set_alive(node, false)?;
        log::info!("storage node {node} failed");
        Ok(self.cluster_state())
    }

    /// Brings a node back and re-replicates every block that is missing or
    /// corrupt on a live placement node, copying from a healthy replica.
    pub fn recover_node(&self, node: &str) -> Result<ClusterState, StoreError> {
        self.set_alive(node, true)?;
        let repaired = self.repair()?;
        log::info!("storage node {node} recovered, {repaired} replicas restored");
        Ok(self.cluster_state())
    }

    /// Restores missing or corrupt replicas on live nodes. Returns the number
    /// of replicas written.
    pub fn repair(&self) -> Result<usize, StoreError> {
        let mut state = self.state.write();
        let mut fixes: Vec<(String, String, Vec<u8>)> = Vec::new();
        for meta in &state.catalog {
            let broken: Vec<&String> = meta
                .placement
                .iter()
                .filter(|n| state.is_alive(n) && !self.replica_ok(&state, n, meta))
                .collect();
            if broken.is_empty() {
                continue;
            }
            let source = meta
                .placement
                .iter()
                .filter(|n| state.is_alive(n))
                .filter_map(|n| self.read_replica(&state, n, &meta.block_id))
                .find(|p| p.len() == meta.byte_len && crc32fast::hash(p) == meta.checksum);
            match source {
                Some(payload) => {
                    for n in broken {
                        fixes.push((n.clone(), meta.block_id.clone(), payload.clone()));
                    }
                }
                None => log::warn!("block {} has no healthy live replica", meta.block_id),
            }
        }
        let count = fixes.len();
        for (node, block_id, payload) in fixes {
            match &self.disk {
                Some(disk) => disk.write_replica(&node, &block_id, &payload)?,
                None => {
                    let n = state.nodes.iter_mut().find(|n| n.id == node).unwrap();
                    n.blocks.insert(block_id, payload);
                }
            }
        }
        Ok(count)
    }

    /// Verifies the placement invariant and every replica checksum, for live
    /// and failed nodes alike.
    pub fn audit(&self) -> AuditReport {
        let state = self.state.read();
        let known: BTreeSet<&str> = state.nodes.iter().map(|n| n.id.as_str()).collect();
        audit_catalog(&state.catalog, self.config.replication, &known, |node, id| {
            self.read_replica(&state, node, id)
        })
    }

    /// Flips one byte of a stored replica. Fault-injection hook for drills
    /// and tests.
    pub fn inject_corruption(&self, node: &str, block_id: &str, byte: usize) -> Result<(), StoreError> {
        let mut state = self.state.write();
        match &self.disk {
            Some(disk) => {
                let path = disk.block_path(node, block_id);
                let mut bytes = std::fs::read(&path).map_err(|e| StoreError::Io(e.to_string()))?;
                let at = disk::BLOCK_MAGIC.len() + byte;
                if at >= bytes.len() {
                    return Err(StoreError::Config(format!("byte {byte} out of range")));
                }
                bytes[at] ^= 0xff;
                std::fs::write(&path, bytes).map_err(|e| StoreError::Io(e.to_string()))
            }
            None => {
                let n = state
                    .nodes
                    .iter_mut()
                    .find(|n| n.id == node)
                    .ok_or_else(|| StoreError::UnknownNode(node.to_string()))?;
                let payload = n
                    .blocks
                    .get_mut(block_id)
                    .ok_or_else(|| StoreError::Corrupt(format!("no replica of {block_id} on {node}")))?;
                let b = payload
                    .get_mut(byte)
                    .ok_or_else(|| StoreError::Config(format!("byte {byte} out of range")))?;
                *b ^= 0xff;
                Ok(())
            }
        }
    }
}

/// Audits a store directory without loading it, so a damaged store can
/// still be inspected.
pub fn audit_dir(path: impl AsRef<Path>) -> Result<AuditReport, StoreError> {
    let disk = DiskLayout::new(path.as_ref());
    let cluster = disk.read_cluster()?;
    let catalog = disk.read_catalog()?;
    let known: BTreeSet<&str> = cluster.nodes.iter().map(|n| n.id.as_str()).collect();
    Ok(audit_catalog(&catalog, cluster.replication_factor, &known, |node, id| {
        disk.read_replica(node, id)
    }))
}

fn audit_catalog(
    catalog: &[BlockMeta],
    replication: usize,
    known: &BTreeSet<&str>,
    read: impl Fn(&str, &str) -> Option<Vec<u8>>,
) -> AuditReport {
    let mut violations = Vec::new();
    let mut replicas_checked = 0;
    let mut flag = |meta: &BlockMeta, node: Option<&String>, kind| {
        violations.push(Violation {
            block_id: meta.block_id.clone(),
            node: node.cloned(),
            kind,
        })
    };
    for meta in catalog {
        let distinct: BTreeSet<&String> = meta.placement.iter().collect();
        if distinct.len() != meta.placement.len() {
            flag(meta, None, ViolationKind::DuplicateNode);
        }
        if distinct.len() != replication {
            flag(
                meta,
                None,
                ViolationKind::WrongReplicaCount {
                    expected: replication,
                    found: distinct.len(),
                },
            );
        }
        for node in distinct {
            replicas_checked += 1;
            if !known.contains(node.as_str()) {
                flag(meta, Some(node), ViolationKind::UnknownNode);
                continue;
            }
            match read(node, &meta.block_id) {
                None => flag(meta, Some(node), ViolationKind::MissingReplica),
                Some(p) if p.len() != meta.byte_len || crc32fast::hash(&p) != meta.checksum => {
                    flag(meta, Some(node), ViolationKind::ChecksumMismatch)
                }
                Some(_) => {}
            }
        }
    }
    AuditReport {
        ok: violations.is_empty(),
        blocks_checked: catalog.len(),
        replicas_checked,
        violations,
    }
}
