//! Read-window planning for the index-nested-loop merge.
//!
//! A merge pass knows every K2 it will query up front, sorted. The reader
//! resolves them to file locations and, on a cache miss, loads a window
//! that covers as many upcoming chunks as the policy allows.

use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::chunk::Chunk;
use super::{IndexEntry, StoreCounters};
use crate::error::{Error, IoContext, Result};
use crate::run::read_exact_at;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ReadPolicy {
    /// One positioned read per queried chunk.
    IndexOnly,
    /// One fixed-size window shared by all batches.
    SingleFixed(u64),
    /// One fixed-size window per batch.
    MultiFixed(u64),
    /// One window sized by the gap heuristic.
    SingleDynamic,
    /// One gap-sized window per batch.
    #[default]
    MultiDynamic,
}

impl ReadPolicy {
    fn per_batch(self) -> bool {
        matches!(self, ReadPolicy::MultiFixed(_) | ReadPolicy::MultiDynamic)
    }
}

impl fmt::Display for ReadPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReadPolicy::IndexOnly => write!(f, "index-only"),
            ReadPolicy::SingleFixed(n) => write!(f, "single-fixed:{n}"),
            ReadPolicy::MultiFixed(n) => write!(f, "multi-fixed:{n}"),
            ReadPolicy::SingleDynamic => write!(f, "single-dynamic"),
            ReadPolicy::MultiDynamic => write!(f, "multi-dynamic"),
        }
    }
}

impl FromStr for ReadPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, size) = match s.split_once(':') {
            Some((n, sz)) => (n, Some(sz.parse::<u64>().map_err(|e| format!("bad window size {sz:?}: {e}"))?)),
            None => (s, None),
        };
        match (name, size) {
            ("index-only", None) => Ok(ReadPolicy::IndexOnly),
            ("single-fixed", Some(n)) if n > 0 => Ok(ReadPolicy::SingleFixed(n)),
            ("multi-fixed", Some(n)) if n > 0 => Ok(ReadPolicy::MultiFixed(n)),
            ("single-dynamic", None) => Ok(ReadPolicy::SingleDynamic),
            ("multi-dynamic", None) => Ok(ReadPolicy::MultiDynamic),
            _ => Err(format!(
                "unknown read policy {s:?}; expected index-only, single-fixed:N, multi-fixed:N, single-dynamic or multi-dynamic"
            )),
        }
    }
}

/// Window size for the chunk at the head of `upcoming`: keep extending
/// while the gap to the next chunk is below `gap_threshold` and the window
/// still fits the cache. A next chunk that lies before the current one (or
/// no next chunk) counts as an infinite gap. Returns 0 if the head chunk
/// alone does not fit the cache.
pub fn dynamic_window(upcoming: impl IntoIterator<Item = IndexEntry>, gap_threshold: u64, cache_size: u64) -> u64 {
    let mut it = upcoming.into_iter();
    let Some(mut cur) = it.next() else {
        return 0;
    };
    let mut w: u64 = 0;
    let mut gap: u64 = 0;
    while gap < gap_threshold && w + gap + cur.len < cache_size {
        w += gap + cur.len;
        gap = match it.next() {
            Some(next) if next.offset >= cur.offset + cur.len => {
                let g = next.offset - cur.offset - cur.len;
                cur = next;
                g
            }
            _ => u64::MAX,
        };
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadEvent {
    pub slot: u64,
    pub offset: u64,
    pub len: u64,
}

struct Window {
    start: u64,
    bytes: Vec<u8>,
}

impl Window {
    fn covers(&self, e: &IndexEntry) -> bool {
        e.offset >= self.start && e.offset + e.len <= self.start + self.bytes.len() as u64
    }
}

/// Serves chunk lookups for one merge pass in query order.
pub(crate) struct ChunkReader {
    policy: ReadPolicy,
    gap_threshold: u64,
    cache_size: u64,
    plan: Vec<Option<IndexEntry>>,
    /// Per slot (batch id, or 0 for single-window policies).
    windows: Vec<(u64, Window)>,
    pub(crate) read_log: Vec<ReadEvent>,
}

impl ChunkReader {
    pub(crate) fn new(policy: ReadPolicy, gap_threshold: u64, cache_size: u64, plan: Vec<Option<IndexEntry>>) -> Self {
        ChunkReader {
            policy,
            gap_threshold,
            cache_size,
            plan,
            windows: Vec::new(),
            read_log: Vec::new(),
        }
    }

    pub(crate) fn plan(&self) -> &[Option<IndexEntry>] {
        &self.plan
    }

    /// Returns the stored chunk for query `cursor`, or `None` if the key
    /// has no chunk. `batch_end` gives the end offset of a batch id.
    pub(crate) fn query(
        &mut self,
        cursor: usize,
        file: &File,
        path: &Path,
        file_end: u64,
        batch_end: impl Fn(u64) -> u64,
        counters: &mut StoreCounters,
    ) -> Result<Option<Chunk>> {
        let Some(entry) = self.plan.get(cursor).copied().flatten() else {
            return Ok(None);
        };
        let slot = if self.policy.per_batch() { entry.batch } else { 0 };
        if let Some((_, w)) = self.windows.iter().find(|(s, w)| *s == slot && w.covers(&entry)) {
            counters.cache_hits += 1;
            let at = (entry.offset - w.start) as usize;
            return decode_at(&w.bytes[at..at + entry.len as usize], entry);
        }

        let limit = if self.policy.per_batch() {
            batch_end(entry.batch)
        } else {
            file_end
        };
        let want = match self.policy {
            ReadPolicy::IndexOnly => entry.len,
            ReadPolicy::SingleFixed(size) | ReadPolicy::MultiFixed(size) => {
                if entry.len >= self.cache_size {
                    0
                } else {
                    size.min(self.cache_size).max(entry.len)
                }
            }
            ReadPolicy::SingleDynamic => {
                dynamic_window(self.plan[cursor..].iter().flatten().copied(), self.gap_threshold, self.cache_size)
            }
            ReadPolicy::MultiDynamic => dynamic_window(
                self.plan[cursor..].iter().flatten().copied().filter(|e| e.batch == entry.batch),
                self.gap_threshold,
                self.cache_size,
            ),
        };

        if want == 0 {
            // Chunk larger than the cache: dedicated read, nothing cached.
            counters.oversized_reads += 1;
            let bytes = self.read(file, path, slot, entry.offset, entry.len, counters)?;
            return decode_at(&bytes, entry);
        }
        let len = want.min(limit.saturating_sub(entry.offset)).max(entry.len);
        let bytes = self.read(file, path, slot, entry.offset, len, counters)?;
        let chunk = decode_at(&bytes[..entry.len as usize], entry);
        if self.policy != ReadPolicy::IndexOnly {
            let window = Window {
                start: entry.offset,
                bytes,
            };
            match self.windows.iter_mut().find(|(s, _)| *s == slot) {
                Some(w) => w.1 = window,
                None => self.windows.push((slot, window)),
            }
        }
        chunk
    }

    fn read(
        &mut self,
        file: &File,
        path: &Path,
        slot: u64,
        offset: u64,
        len: u64,
        counters: &mut StoreCounters,
    ) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len as usize];
        read_exact_at(file, &mut buf, offset).at(path)?;
        counters.reads += 1;
        counters.bytes_read += len;
        self.read_log.push(ReadEvent { slot, offset, len });
        Ok(buf)
    }
}

fn decode_at(bytes: &[u8], entry: IndexEntry) -> Result<Option<Chunk>> {
    let (chunk, batch, used) = Chunk::decode_frame(bytes, entry.offset)?;
    if used as u64 != entry.len || batch != entry.batch {
        return Err(Error::corrupt(
            entry.offset,
            format!(
                "index says batch {} len {}, frame says batch {batch} len {used}",
                entry.batch, entry.len
            ),
        ));
    }
    Ok(Some(chunk))
}
