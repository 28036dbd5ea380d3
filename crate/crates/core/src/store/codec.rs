//! Block packing: records are encoded into one contiguous byte stream which
//! is then cut at exact `limit` boundaries. Non-final blocks are always
//! exactly `limit` bytes; a record may straddle two blocks.

use serde::{Deserialize, Serialize};

use crate::model::{MetricKey, ObjectId, Quality, Timestamp};

use super::StoreError;

pub const DEFAULT_BLOCK_SIZE_LIMIT: usize = 32 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub block_id: String,
    pub byte_len: usize,
    pub checksum: u32,
    #[serde(skip)]
    pub payload: Vec<u8>,
}

impl Block {
    pub fn new(block_id: String, payload: Vec<u8>) -> Self {
        Block {
            block_id,
            byte_len: payload.len(),
            checksum: crc32fast::hash(&payload),
            payload,
        }
    }

    pub fn verify(&self) -> bool {
        self.byte_len == self.payload.len()
            && self.byte_len > 0
            && crc32fast::hash(&self.payload) == self.checksum
    }
}

/// Fixed-layout binary encoding of one record.
pub trait Record: Sized {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(input: &mut &[u8]) -> Option<Self>;
}

pub fn encode_all<T: Record>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        item.encode(&mut out);
    }
    out
}

/// Splits an encoded stream into blocks. Empty input yields no blocks.
pub fn pack_bytes(bytes: &[u8], limit: usize, id_prefix: &str) -> Vec<Block> {
    assert!(limit > 0, "block size limit must be positive");
    bytes
        .chunks(limit)
        .enumerate()
        .map(|(i, chunk)| Block::new(format!("{id_prefix}-{i:05}"), chunk.to_vec()))
        .collect()
}

pub fn pack<T: Record>(items: &[T], limit: usize, id_prefix: &str) -> Vec<Block> {
    pack_bytes(&encode_all(items), limit, id_prefix)
}

pub fn unpack<T: Record>(blocks: &[Block]) -> Result<Vec<T>, StoreError> {
    let mut bytes = Vec::with_capacity(blocks.iter().map(|b| b.payload.len()).sum());
    for block in blocks {
        if !block.verify() {
            return Err(StoreError::ChecksumMismatch {
                block_id: block.block_id.clone(),
            });
        }
        bytes.extend_from_slice(&block.payload);
    }
    decode_all(&bytes)
}

pub fn decode_all<T: Record>(bytes: &[u8]) -> Result<Vec<T>, StoreError> {
    let mut input = bytes;
    let mut out = Vec::new();
    while !input.is_empty() {
        match T::decode(&mut input) {
            Some(item) => out.push(item),
            None => return Err(StoreError::Corrupt("truncated record stream".into())),
        }
    }
    Ok(out)
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    let len = u16::try_from(s.len()).expect("identifier longer than 64 KiB");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn take<'a>(input: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if input.len() < n {
        return None;
    }
    let (head, tail) = input.split_at(n);
    *input = tail;
    Some(head)
}

pub(crate) fn get_str(input: &mut &[u8]) -> Option<String> {
    let len = u16::from_le_bytes(take(input, 2)?.try_into().ok()?) as usize;
    String::from_utf8(take(input, len)?.to_vec()).ok()
}

pub(crate) fn get_u64(input: &mut &[u8]) -> Option<u64> {
    Some(u64::from_le_bytes(take(input, 8)?.try_into().ok()?))
}

pub(crate) fn get_i64(input: &mut &[u8]) -> Option<i64> {
    Some(i64::from_le_bytes(take(input, 8)?.try_into().ok()?))
}

pub(crate) fn get_f64(input: &mut &[u8]) -> Option<f64> {
    Some(f64::from_bits(get_u64(input)?))
}

pub(crate) fn get_u8(input: &mut &[u8]) -> Option<u8> {
    Some(take(input, 1)?[0])
}

pub(crate) fn get_metric(input: &mut &[u8]) -> Option<MetricKey> {
    get_str(input)?.parse().ok()
}

/// One aggregated slice cell. `count` is every fact in the bucket including
/// gap placeholders; `valid` is how many finite values fed `value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub object_id: ObjectId,
    pub metric: MetricKey,
    pub bucket_ts: Timestamp,
    pub value: Option<f64>,
    pub count: u64,
    pub valid: u64,
    pub quality: Quality,
}

impl Cell {
    /// Bitwise equality, so NaN-free cells compare exactly and `-0.0 != 0.0`.
    pub fn bit_eq(&self, other: &Cell) -> bool {
        self.object_id == other.object_id
            && self.metric == other.metric
            && self.bucket_ts == other.bucket_ts
            && self.value.map(f64::to_bits) == other.value.map(f64::to_bits)
            && self.count == other.count
            && self.valid == other.valid
            && self.quality == other.quality
    }
}

impl Record for Cell {
    fn encode(&self, out: &mut Vec<u8>) {
        put_str(out, self.object_id.as_str());
        put_str(out, &self.metric.to_string());
        out.extend_from_slice(&self.bucket_ts.to_le_bytes());
        match self.value {
            Some(v) => {
                out.push(1);
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.valid.to_le_bytes());
        out.push(self.quality.code());
    }

    fn decode(input: &mut &[u8]) -> Option<Self> {
        let object_id = ObjectId(get_str(input)?);
        let metric = get_metric(input)?;
        let bucket_ts = get_i64(input)?;
        let value = match get_u8(input)? {
            0 => None,
            1 => Some(get_f64(input)?),
            _ => return None,
        };
        Some(Cell {
            object_id,
            metric,
            bucket_ts,
            value,
            count: get_u64(input)?,
            valid: get_u64(input)?,
            quality: Quality::from_code(get_u8(input)?)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Metric;
    use proptest::prelude::*;

    fn cell(i: i64) -> Cell {
        Cell {
            object_id: ObjectId::new(format!("obj-{i:03}")),
            metric: MetricKey::Actual(Metric::HeatEnergyKwh),
            bucket_ts: i * 3600,
            value: Some(i as f64 * 0.5),
            count: 1,
            valid: 1,
            quality: Quality::Good,
        }
    }

    #[test]
    fn empty_cells_pack_to_zero_blocks() {
        assert!(pack::<Cell>(&[], 4096, "s").is_empty());
    }

    #[test]
    fn seventy_mib_with_32_mib_limit_is_three_blocks() {
        let mib = 1024 * 1024;
        let bytes = vec![7u8; 70 * mib];
        let blocks = pack_bytes(&bytes, 32 * mib, "big");
        let lens: Vec<usize> = blocks.iter().map(|b| b.byte_len).collect();
        assert_eq!(lens, vec![32 * mib, 32 * mib, 6 * mib]);
    }

    #[test]
    fn corrupt_payload_byte_is_detected() {
        let cells: Vec<Cell> = (0..500).map(cell).collect();
        let mut blocks = pack(&cells, 4096, "s");
        assert!(blocks.len() > 1);
        blocks[1].payload[17] ^= 0xff;
        match unpack::<Cell>(&blocks) {
            Err(StoreError::ChecksumMismatch { block_id }) => {
                assert_eq!(block_id, blocks[1].block_id)
            }
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    fn arb_cell() -> impl Strategy<Value = Cell> {
        (
            "[a-z0-9-]{1,12}",
            0usize..5,
            any::<i64>(),
            proptest::option::of(any::<f64>().prop_filter("finite", |v| v.is_finite())),
            any::<u64>(),
            any::<u64>(),
            0u8..4,
        )
            .prop_map(|(o, m, ts, value, count, valid, q)| Cell {
                object_id: ObjectId(o),
                metric: MetricKey::Actual(Metric::ALL[m]),
                bucket_ts: ts,
                value,
                count,
                valid,
                quality: Quality::from_code(q).unwrap(),
            })
    }

    proptest! {
        #[test]
        fn unpack_inverts_pack(cells in proptest::collection::vec(arb_cell(), 0..200), limit in 1usize..512) {
            let blocks = pack(&cells, limit, "p");
            for b in blocks.iter().rev().skip(1) {
                prop_assert_eq!(b.byte_len, limit);
            }
            let back: Vec<Cell> = unpack(&blocks).unwrap();
            prop_assert_eq!(back.len(), cells.len());
            for (a, b) in back.iter().zip(&cells) {
                prop_assert!(a.bit_eq(b));
            }
        }
    }
}
