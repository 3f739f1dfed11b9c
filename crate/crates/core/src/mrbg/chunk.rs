use crate::error::{Error, Result};
use crate::record::{check_len, Cursor, EdgeValue, MapKey, MrbgEdge, FRAME_HEADER};

/// All preserved edges sharing one K2, sorted by map key. Stored chunks
/// never contain tombstones.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Chunk {
    pub k2: Vec<u8>,
    pub edges: Vec<(MapKey, Vec<u8>)>,
}

/// Outcome counters for applying one delta group to a chunk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeOutcome {
    pub inserted: u64,
    pub replaced: u64,
    pub deleted: u64,
    pub unknown_tombstones: u64,
}

impl Chunk {
    pub fn new(k2: impl Into<Vec<u8>>) -> Self {
        Chunk {
            k2: k2.into(),
            edges: Vec::new(),
        }
    }

    /// Builds a chunk from valued edges that share `k2` and arrive in map
    /// key order (a reduce group from the shuffle).
    pub fn from_edges(k2: &[u8], edges: &[MrbgEdge]) -> Result<Self> {
        let mut chunk = Chunk::new(k2);
        for e in edges {
            match &e.value {
                EdgeValue::Value(v) => {
                    if chunk.edges.last().is_some_and(|(mk, _)| *mk >= e.map_key) {
                        return Err(Error::Contract(format!(
                            "duplicate or unordered edge ({}, {}) in one chunk",
                            crate::record::show(k2),
                            e.map_key
                        )));
                    }
                    chunk.edges.push((e.map_key, v.clone()));
                }
                EdgeValue::Tombstone => {
                    return Err(Error::Contract("tombstone edge in a full chunk".into()));
                }
            }
        }
        Ok(chunk)
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn values(&self) -> Vec<&[u8]> {
        self.edges.iter().map(|(_, v)| v.as_slice()).collect()
    }

    /// Applies delta edges in order: a tombstone deletes `(k2, mk)`, a
    /// valued edge inserts or replaces it.
    pub fn apply(&mut self, delta: &[MrbgEdge]) -> MergeOutcome {
        let mut out = MergeOutcome::default();
        for e in delta {
            debug_assert_eq!(e.k2, self.k2);
            let pos = self.edges.binary_search_by(|(mk, _)| mk.cmp(&e.map_key));
            match (&e.value, pos) {
                (EdgeValue::Tombstone, Ok(i)) => {
                    self.edges.remove(i);
                    out.deleted += 1;
                }
                (EdgeValue::Tombstone, Err(_)) => out.unknown_tombstones += 1,
                (EdgeValue::Value(v), Ok(i)) => {
                    self.edges[i].1 = v.clone();
                    out.replaced += 1;
                }
                (EdgeValue::Value(v), Err(i)) => {
                    self.edges.insert(i, (e.map_key, v.clone()));
                    out.inserted += 1;
                }
            }
        }
        out
    }

    /// Frame: `u32 body len | u64 batch | u32 k2 len | k2 | u32 edge count |
    /// (mk | u32 value len | value)*`. An edge count of zero records a removal.
    pub fn encode_frame(&self, batch: u64, out: &mut Vec<u8>) -> Result<()> {
        let start = out.len();
        out.extend_from_slice(&[0; FRAME_HEADER]);
        out.extend_from_slice(&batch.to_be_bytes());
        out.extend_from_slice(&check_len("k2", self.k2.len())?.to_be_bytes());
        out.extend_from_slice(&self.k2);
        out.extend_from_slice(&check_len("chunk edges", self.edges.len())?.to_be_bytes());
        for (mk, v) in &self.edges {
            out.extend_from_slice(&mk.partition.to_be_bytes());
            out.extend_from_slice(&mk.sequence.to_be_bytes());
            out.extend_from_slice(&check_len("value", v.len())?.to_be_bytes());
            out.extend_from_slice(v);
        }
        let body = check_len("chunk", out.len() - start - FRAME_HEADER)?;
        out[start..start + FRAME_HEADER].copy_from_slice(&body.to_be_bytes());
        Ok(())
    }

    /// Decodes one chunk frame at the start of `buf`; `base` is the file
    /// offset of `buf[0]`. Returns the chunk, its batch id and frame size.
    pub fn decode_frame(buf: &[u8], base: u64) -> Result<(Chunk, u64, usize)> {
        let mut head = Cursor::new(buf, base);
        let body_len = head.u32()? as usize;
        let end = FRAME_HEADER + body_len;
        if buf.len() < end {
            return Err(Error::corrupt(base, format!("chunk frame of {end} bytes truncated to {}", buf.len())));
        }
        let mut cur = Cursor::new(&buf[FRAME_HEADER..end], base + FRAME_HEADER as u64);
        let batch = cur.u64()?;
        let k2 = cur.bytes()?;
        let count = cur.u32()? as usize;
        let mut edges = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let partition = cur.u32()?;
            let sequence = cur.u64()?;
            let value = cur.bytes()?;
            edges.push((MapKey::new(partition, sequence), value));
        }
        cur.finish()?;
        Ok((Chunk { k2, edges }, batch, end))
    }
}
