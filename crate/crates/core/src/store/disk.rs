//! On-disk layout of a store directory:
//!
//! ```text
//! <root>/CLUSTER                     node states, replication, store version
//! <root>/CATALOG                     append-only block catalog (NDJSON)
//! <root>/BATCHES                     append-only list of immersed batch ids
//! <root>/nodes/<node>/append.log     append-only list of blocks written to the node
//! <root>/nodes/<node>/blocks/*.blk   block payloads
//! ```
//!
//! Every file starts with a magic header naming the format version.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cluster::NodeState;
use super::{BlockMeta, StoreError};

pub const CLUSTER_MAGIC: &str = "HEATGRID-CLUSTER/1";
pub const CATALOG_MAGIC: &str = "HEATGRID-CATALOG/1";
pub const BATCHES_MAGIC: &str = "HEATGRID-BATCHES/1";
pub const APPEND_LOG_MAGIC: &str = "HEATGRID-APPENDLOG/1";
pub const BLOCK_MAGIC: &[u8; 8] = b"HGBLK\x00\x01\x00";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ClusterFile {
    pub magic: String,
    pub nodes: Vec<NodeState>,
    pub replication_factor: usize,
    pub block_size_limit: usize,
    pub store_version: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct DiskLayout {
    root: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> StoreError {
    StoreError::Io(format!("{}: {e}", path.display()))
}

impl DiskLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DiskLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn cluster_path(&self) -> PathBuf {
        self.root.join("CLUSTER")
    }

    fn catalog_path(&self) -> PathBuf {
        self.root.join("CATALOG")
    }

    fn batches_path(&self) -> PathBuf {
        self.root.join("BATCHES")
    }

    fn node_dir(&self, node: &str) -> PathBuf {
        self.root.join("nodes").join(node)
    }

    pub fn block_path(&self, node: &str, block_id: &str) -> PathBuf {
        self.node_dir(node).join("blocks").join(format!("{block_id}.blk"))
    }

    pub fn exists(&self) -> bool {
        self.cluster_path().exists()
    }

    pub fn create(&self, cluster: &ClusterFile) -> Result<(), StoreError> {
        for node in &cluster.nodes {
            let dir = self.node_dir(&node.id).join("blocks");
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            let log = self.node_dir(&node.id).join("append.log");
            if !log.exists() {
                fs::write(&log, format!("{APPEND_LOG_MAGIC}\n")).map_err(|e| io_err(&log, e))?;
            }
        }
        for (path, magic) in [
            (self.catalog_path(), CATALOG_MAGIC),
            (self.batches_path(), BATCHES_MAGIC),
        ] {
            if !path.exists() {
                fs::write(&path, format!("{magic}\n")).map_err(|e| io_err(&path, e))?;
            }
        }
        self.write_cluster(cluster)
    }

    pub fn write_cluster(&self, cluster: &ClusterFile) -> Result<(), StoreError> {
        let path = self.cluster_path();
        let tmp = path.with_extension("tmp");
        let body = serde_json::to_string_pretty(cluster).expect("cluster file serializes");
        fs::write(&tmp, body + "\n").map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    pub fn read_cluster(&self) -> Result<ClusterFile, StoreError> {
        let path = self.cluster_path();
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let cluster: ClusterFile = serde_json::from_str(&text)
            .map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))?;
        if cluster.magic != CLUSTER_MAGIC {
            return Err(StoreError::Corrupt(format!(
                "{}: unsupported format `{}`",
                path.display(),
                cluster.magic
            )));
        }
        Ok(cluster)
    }

    fn append_line(path: &Path, line: &str) -> Result<(), StoreError> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(path, e))
    }

    fn read_lines(path: &Path, magic: &str) -> Result<Vec<String>, StoreError> {
        let f = File::open(path).map_err(|e| io_err(path, e))?;
        let mut lines = BufReader::new(f).lines();
        match lines.next() {
            Some(Ok(first)) if first == magic => {}
            _ => {
                return Err(StoreError::Corrupt(format!(
                    "{}: missing `{magic}` header",
                    path.display()
                )))
            }
        }
        lines
            .map(|l| l.map_err(|e| io_err(path, e)))
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
            .collect()
    }

    pub fn append_catalog(&self, meta: &BlockMeta) -> Result<(), StoreError> {
        let line = serde_json::to_string(meta).expect("block meta serializes");
        Self::append_line(&self.catalog_path(), &line)
    }

    pub fn read_catalog(&self) -> Result<Vec<BlockMeta>, StoreError> {
        let path = self.catalog_path();
        Self::read_lines(&path, CATALOG_MAGIC)?
            .iter()
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))
            })
            .collect()
    }

    pub fn append_batch(&self, batch_id: &str) -> Result<(), StoreError> {
        Self::append_line(&self.batches_path(), batch_id)
    }

    pub fn read_batches(&self) -> Result<Vec<String>, StoreError> {
        Self::read_lines(&self.batches_path(), BATCHES_MAGIC)
    }

    pub fn write_replica(&self, node: &str, block_id: &str, payload: &[u8]) -> Result<(), StoreError> {
        let path = self.block_path(node, block_id);
        let mut bytes = Vec::with_capacity(payload.len() + BLOCK_MAGIC.len());
        bytes.extend_from_slice(BLOCK_MAGIC);
        bytes.extend_from_slice(payload);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        let log = self.node_dir(node).join("append.log");
        Self::append_line(&log, &format!("{block_id} {}", payload.len()))
    }

    /// Payload of one replica, or `None` if the file is absent or lacks the
    /// block magic. Checksums are the caller's business.
    pub fn read_replica(&self, node: &str, block_id: &str) -> Option<Vec<u8>> {
        let bytes = fs::read(self.block_path(node, block_id)).ok()?;
        bytes
            .strip_prefix(BLOCK_MAGIC.as_slice())
            .map(<[u8]>::to_vec)
    }
}
