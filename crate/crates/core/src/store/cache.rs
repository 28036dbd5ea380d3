use std::collections::BTreeSet;
use std::sync::Arc;

use lru::LruCache;

use crate::model::{ObjectId, Window};

use super::slice::{Slice, SliceSpec};

pub const DEFAULT_CACHE_CAPACITY: usize = 256 * 1024 * 1024;

/// Fixed per-entry charge on top of the encoded slice size.
const ENTRY_OVERHEAD: usize = 256;

/// Exact-spec slice cache, LRU-evicted by total byte size.
pub(crate) struct SliceCache {
    entries: LruCache<SliceSpec, Arc<Slice>>,
    bytes: usize,
    capacity: usize,
    pub hits: u64,
    pub misses: u64,
}

fn charge(slice: &Slice) -> usize {
    slice.encoded_len() + ENTRY_OVERHEAD
}

impl SliceCache {
    pub fn new(capacity: usize) -> Self {
        SliceCache {
            entries: LruCache::unbounded(),
            bytes: 0,
            capacity,
            hits: 0,
            misses: 0,
        }
    }

    pub fn get(&mut self, key: &SliceSpec) -> Option<Arc<Slice>> {
        let hit = self.entries.get(key).cloned();
        match hit {
            Some(_) => self.hits += 1,
            None => self.misses += 1,
        }
        hit
    }

    pub fn insert(&mut self, key: SliceSpec, slice: Arc<Slice>) {
        let size = charge(&slice);
        if size > self.capacity {
            return;
        }
        if let Some(old) = self.entries.put(key, slice) {
            self.bytes -= charge(&old);
        }
        self.bytes += size;
        while self.bytes > self.capacity {
            match self.entries.pop_lru() {
                Some((_, evicted)) => self.bytes -= charge(&evicted),
                None => break,
            }
        }
    }

    /// Drops every entry whose object selection and window overlap the given
    /// ones. Returns the number dropped.
    pub fn invalidate(&mut self, objects: &BTreeSet<ObjectId>, window: &Window) -> usize {
        let doomed: Vec<SliceSpec> = self
            .entries
            .iter()
            .filter(|(spec, _)| spec.window.overlaps(window) && spec.objects.overlaps(objects))
            .map(|(spec, _)| spec.clone())
            .collect();
        for key in &doomed {
            if let Some(old) = self.entries.pop(key) {
                self.bytes -= charge(&old);
            }
        }
        doomed.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.bytes = 0;
    }

    pub fn keys(&self) -> Vec<SliceSpec> {
        self.entries.iter().map(|(k, _)| k.clone()).collect()
    }
}
