//! Persistent store for the preserved map/reduce bipartite graph of one
//! reduce partition.
//!
//! Chunks (all edges of one K2) live in an append-only data file. Each
//! merge pass appends the chunks it rewrote as one batch; the index maps
//! every K2 to its latest chunk and is replaced atomically when a pass
//! finishes. Compaction rewrites live chunks into a fresh generation.
//!
//! `mrbg.dat`: `"IMRG" | u16 version | u64 generation | chunk frames*`
//!
//! `mrbg.idx`: `"IMRX" | u16 version | u64 generation | u64 committed len |
//! u64 next batch | u32 batch count | (u64 id | u64 start | u64 end)* |
//! u64 entry count | (u32 key len | key | u64 batch | u64 offset | u64 len)*`

mod chunk;
mod window;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use chunk::{Chunk, MergeOutcome};
pub use window::{dynamic_window, ReadEvent, ReadPolicy};

use crate::error::{Error, IoContext, Result};
use crate::record::{check_len, Cursor, MrbgEdge};
use crate::run::{read_exact_at, tmp_sibling};
use window::ChunkReader;

const DATA_MAGIC: &[u8; 4] = b"IMRG";
const INDEX_MAGIC: &[u8; 4] = b"IMRX";
const STORE_VERSION: u16 = 1;
const DATA_HEADER_LEN: u64 = 4 + 2 + 8;

pub const DATA_FILE: &str = "mrbg.dat";
pub const INDEX_FILE: &str = "mrbg.idx";

pub const DEFAULT_GAP_THRESHOLD: u64 = 100 * 1024;
pub const DEFAULT_READ_CACHE: u64 = 1 << 20;
pub const DEFAULT_APPEND_BUFFER: usize = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub read_cache_size: u64,
    pub gap_threshold: u64,
    pub append_buffer: usize,
    pub policy: ReadPolicy,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            read_cache_size: DEFAULT_READ_CACHE,
            gap_threshold: DEFAULT_GAP_THRESHOLD,
            append_buffer: DEFAULT_APPEND_BUFFER,
            policy: ReadPolicy::default(),
        }
    }
}

/// Location of a chunk frame in the data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub batch: u64,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchMeta {
    pub id: u64,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreCounters {
    pub reads: u64,
    pub bytes_read: u64,
    pub cache_hits: u64,
    pub oversized_reads: u64,
    pub chunks_written: u64,
    pub bytes_written: u64,
    pub unknown_tombstones: u64,
    pub passes: u64,
}

impl StoreCounters {
    pub fn add(&mut self, o: &StoreCounters) {
        self.reads += o.reads;
        self.bytes_read += o.bytes_read;
        self.cache_hits += o.cache_hits;
        self.oversized_reads += o.oversized_reads;
        self.chunks_written += o.chunks_written;
        self.bytes_written += o.bytes_written;
        self.unknown_tombstones += o.unknown_tombstones;
        self.passes += o.passes;
    }
}

/// Where an injected crash interrupts compaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompactionCrash {
    /// New files written, neither swapped in.
    BeforeIndexSwap,
    /// New index swapped in, data file not yet.
    AfterIndexSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompactionReport {
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub chunks: u64,
}

/// Summary of one merge pass driven by [`MrbgStore::merge_delta`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeSummary {
    pub keys: u64,
    pub rewritten: u64,
    pub removed: u64,
    pub edges: MergeOutcome,
}

pub struct MrbgStore {
    dir: PathBuf,
    data_path: PathBuf,
    index_path: PathBuf,
    data: File,
    generation: u64,
    committed_len: u64,
    next_batch: u64,
    batches: Vec<BatchMeta>,
    index: HashMap<Vec<u8>, IndexEntry>,
    config: StoreConfig,
    counters: StoreCounters,
    last_reads: Vec<ReadEvent>,
    dirty: bool,
}

impl std::fmt::Debug for MrbgStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MrbgStore")
            .field("dir", &self.dir)
            .field("generation", &self.generation)
            .field("chunks", &self.index.len())
            .field("batches", &self.batches.len())
            .finish()
    }
}

impl MrbgStore {
    /// Creates an empty store in `dir`, discarding any previous one.
    pub fn create(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Self> {
        let dir = dir.as_ref();
        for name in [DATA_FILE, INDEX_FILE] {
            for path in [dir.join(name), compact_sibling(&dir.join(name))] {
                if path.exists() {
                    fs::remove_file(&path).at(&path)?;
                }
            }
        }
        Self::open(dir, config)
    }

    /// Opens the store in `dir`, creating it if absent and recovering from
    /// an interrupted flush or compaction.
    pub fn open(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).at(&dir)?;
        let data_path = dir.join(DATA_FILE);
        let index_path = dir.join(INDEX_FILE);
        let data_compact = compact_sibling(&data_path);
        let index_compact = compact_sibling(&index_path);
        let stale_tmp = tmp_sibling(&index_path);
        if stale_tmp.is_file() {
            fs::remove_file(&stale_tmp).at(&stale_tmp)?;
        }

        let index = match fs::read(&index_path) {
            Ok(bytes) => Some(IndexFile::decode(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(&index_path, e)),
        };
        let data_gen = read_data_generation(&data_path)?;

        if let Some(ix) = &index {
            if data_gen != Some(ix.generation) {
                // Crash after the index swap: the new data file must exist.
                match read_data_generation(&data_compact)? {
                    Some(g) if g == ix.generation => fs::rename(&data_compact, &data_path).at(&data_path)?,
                    _ => {
                        return Err(Error::Metadata(format!(
                            "{}: index generation {} has no matching data file",
                            dir.display(),
                            ix.generation
                        )))
                    }
                }
            }
        }
        for stale in [&data_compact, &index_compact] {
            if stale.exists() {
                fs::remove_file(stale).at(stale)?;
            }
        }

        let data = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&data_path)
            .at(&data_path)?;
        let mut store = MrbgStore {
            dir,
            data_path,
            index_path,
            data,
            generation: 0,
            committed_len: DATA_HEADER_LEN,
            next_batch: 0,
            batches: Vec::new(),
            index: HashMap::new(),
            config,
            counters: StoreCounters::default(),
            last_reads: Vec::new(),
            dirty: false,
        };
        match (index, data_gen) {
            (Some(ix), _) => store.load(ix)?,
            (None, Some(_)) => store.rebuild_index()?,
            (None, None) => {
                store.write_data_header(0)?;
                store.write_index()?;
            }
        }
        store.data.set_len(store.committed_len).at(&store.data_path)?;
        Ok(store)
    }

    fn load(&mut self, ix: IndexFile) -> Result<()> {
        let actual = self.data.metadata().at(&self.data_path)?.len();
        if actual < ix.committed_len {
            return Err(Error::corrupt(
                actual,
                format!("data file shorter than committed length {}", ix.committed_len),
            ));
        }
        self.generation = ix.generation;
        self.committed_len = ix.committed_len;
        self.next_batch = ix.next_batch;
        self.batches = ix.batches;
        self.index = ix.entries.into_iter().collect();
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn set_policy(&mut self, policy: ReadPolicy) {
        self.config.policy = policy;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn batches(&self) -> &[BatchMeta] {
        &self.batches
    }

    pub fn data_len(&self) -> u64 {
        self.committed_len
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn counters(&self) -> &StoreCounters {
        &self.counters
    }

    pub fn take_counters(&mut self) -> StoreCounters {
        std::mem::take(&mut self.counters)
    }

    /// Reads issued by the most recent merge pass, in order.
    pub fn last_pass_reads(&self) -> &[ReadEvent] {
        &self.last_reads
    }

    pub fn entry(&self, k2: &[u8]) -> Option<IndexEntry> {
        self.index.get(k2).copied()
    }

    /// All stored K2s in byte order.
    pub fn keys(&self) -> Vec<Vec<u8>> {
        let mut keys: Vec<Vec<u8>> = self.index.keys().cloned().collect();
        keys.sort();
        keys
    }

    fn ensure_clean(&self) -> Result<()> {
        if self.dirty {
            Err(Error::StoreDirty(self.dir.clone()))
        } else {
            Ok(())
        }
    }

    /// Point lookup with a single positioned read.
    pub fn get(&self, k2: &[u8]) -> Result<Option<Chunk>> {
        self.ensure_clean()?;
        let Some(e) = self.index.get(k2) else {
            return Ok(None);
        };
        let mut buf = vec![0u8; e.len as usize];
        read_exact_at(&self.data, &mut buf, e.offset).at(&self.data_path)?;
        let (chunk, _, _) = Chunk::decode_frame(&buf, e.offset)?;
        Ok(Some(chunk))
    }

    /// Starts a merge pass that will query `keys` (sorted ascending, each
    /// at most once) and append rewritten chunks as one new batch.
    pub fn begin_pass(&mut self, keys: &[Vec<u8>]) -> Result<MergePass<'_>> {
        self.ensure_clean()?;
        debug_assert!(keys.windows(2).all(|w| w[0] < w[1]), "pass keys must be sorted and distinct");
        let plan = keys.iter().map(|k| self.index.get(k).copied()).collect();
        let reader = ChunkReader::new(self.config.policy, self.config.gap_threshold, self.config.read_cache_size, plan);
        let batch = self.next_batch;
        let start = self.committed_len;
        Ok(MergePass {
            store: self,
            reader,
            batch,
            buf: Vec::new(),
            buf_start: start,
            updates: Vec::new(),
            counters: StoreCounters::default(),
            finished: false,
        })
    }

    /// Merges delta edge groups (sorted by K2, edges in shuffle order) into
    /// the stored chunks as one batch. `on_chunk` sees every affected K2
    /// with its merged chunk, which is empty if all edges were deleted.
    pub fn merge_delta<F>(&mut self, groups: &[(Vec<u8>, Vec<MrbgEdge>)], mut on_chunk: F) -> Result<MergeSummary>
    where
        F: FnMut(&[u8], &Chunk) -> Result<()>,
    {
        let keys: Vec<Vec<u8>> = groups.iter().map(|(k, _)| k.clone()).collect();
        let mut summary = MergeSummary {
            keys: keys.len() as u64,
            ..Default::default()
        };
        let mut pass = self.begin_pass(&keys)?;
        for (i, (k2, edges)) in groups.iter().enumerate() {
            let stored = pass.query(i)?;
            let existed = stored.is_some();
            let mut chunk = stored.unwrap_or_else(|| Chunk::new(k2.clone()));
            let before = chunk.edges.clone();
            let outcome = chunk.apply(edges);
            summary.edges.inserted += outcome.inserted;
            summary.edges.replaced += outcome.replaced;
            summary.edges.deleted += outcome.deleted;
            summary.edges.unknown_tombstones += outcome.unknown_tombstones;
            pass.counters.unknown_tombstones += outcome.unknown_tombstones;
            on_chunk(k2, &chunk)?;
            if chunk.is_empty() {
                if existed {
                    pass.remove(k2)?;
                    summary.removed += 1;
                }
            } else if chunk.edges != before {
                pass.put(&chunk)?;
                summary.rewritten += 1;
            }
        }
        pass.finish()?;
        Ok(summary)
    }

    /// Rewrites all live chunks into a new generation and swaps it in.
    pub fn compact(&mut self) -> Result<CompactionReport> {
        self.compact_with(None)
    }

    pub fn compact_with(&mut self, crash: Option<CompactionCrash>) -> Result<CompactionReport> {
        self.ensure_clean()?;
        let generation = self.generation + 1;
        let batch = self.next_batch;
        let data_compact = compact_sibling(&self.data_path);
        let index_compact = compact_sibling(&self.index_path);

        let mut out = Vec::new();
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_be_bytes());
        out.extend_from_slice(&generation.to_be_bytes());
        let mut entries = Vec::with_capacity(self.index.len());
        let mut file = File::create(&data_compact).at(&data_compact)?;
        for k2 in self.keys() {
            let chunk = self.get(&k2)?.expect("indexed key");
            let offset = out.len() as u64;
            chunk.encode_frame(batch, &mut out)?;
            entries.push((
                k2,
                IndexEntry {
                    batch,
                    offset,
                    len: out.len() as u64 - offset,
                },
            ));
        }
        file.write_all(&out).at(&data_compact)?;
        file.sync_all().at(&data_compact)?;
        let end = out.len() as u64;
        let ix = IndexFile {
            generation,
            committed_len: end,
            next_batch: batch + 1,
            batches: if entries.is_empty() {
                Vec::new()
            } else {
                vec![BatchMeta {
                    id: batch,
                    start: DATA_HEADER_LEN,
                    end,
                }]
            },
            entries,
        };
        write_file_synced(&index_compact, &ix.encode()?)?;
        if crash == Some(CompactionCrash::BeforeIndexSwap) {
            return Err(Error::InjectedCrash("compaction before index swap".into()));
        }
        fs::rename(&index_compact, &self.index_path).at(&self.index_path)?;
        if crash == Some(CompactionCrash::AfterIndexSwap) {
            return Err(Error::InjectedCrash("compaction after index swap".into()));
        }
        fs::rename(&data_compact, &self.data_path).at(&self.data_path)?;
        self.data = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&self.data_path)
            .at(&self.data_path)?;
        let report = CompactionReport {
            bytes_before: self.committed_len,
            bytes_after: end,
            chunks: ix.entries.len() as u64,
        };
        self.load(ix)?;
        Ok(report)
    }

    /// Reconstructs the index by scanning the data file; a torn tail frame
    /// ends the scan and is discarded.
    pub fn rebuild_index(&mut self) -> Result<()> {
        let bytes = fs::read(&self.data_path).at(&self.data_path)?;
        let generation = parse_data_header(&bytes).ok_or_else(|| Error::corrupt(0, "bad data file header"))?;
        let mut pos = DATA_HEADER_LEN as usize;
        let mut index = HashMap::new();
        let mut batches: Vec<BatchMeta> = Vec::new();
        while pos < bytes.len() {
            let Ok((chunk, batch, used)) = Chunk::decode_frame(&bytes[pos..], pos as u64) else {
                break;
            };
            let (start, end) = (pos as u64, (pos + used) as u64);
            match batches.last_mut() {
                Some(b) if b.id == batch => b.end = end,
                _ => batches.push(BatchMeta { id: batch, start, end }),
            }
            if chunk.is_empty() {
                index.remove(&chunk.k2);
            } else {
                index.insert(
                    chunk.k2,
                    IndexEntry {
                        batch,
                        offset: start,
                        len: used as u64,
                    },
                );
            }
            pos += used;
        }
        self.generation = generation;
        self.committed_len = pos as u64;
        self.next_batch = batches.iter().map(|b| b.id + 1).max().unwrap_or(0);
        self.batches = batches;
        self.index = index;
        self.data.set_len(self.committed_len).at(&self.data_path)?;
        self.write_index()
    }

    fn write_data_header(&mut self, generation: u64) -> Result<()> {
        let mut h = Vec::with_capacity(DATA_HEADER_LEN as usize);
        h.extend_from_slice(DATA_MAGIC);
        h.extend_from_slice(&STORE_VERSION.to_be_bytes());
        h.extend_from_slice(&generation.to_be_bytes());
        self.data.set_len(0).at(&self.data_path)?;
        (&self.data).seek(SeekFrom::Start(0)).at(&self.data_path)?;
        (&self.data).write_all(&h).at(&self.data_path)?;
        self.generation = generation;
        self.committed_len = DATA_HEADER_LEN;
        Ok(())
    }

    fn write_index(&self) -> Result<()> {
        let mut entries: Vec<(Vec<u8>, IndexEntry)> = self.index.iter().map(|(k, e)| (k.clone(), *e)).collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let ix = IndexFile {
            generation: self.generation,
            committed_len: self.committed_len,
            next_batch: self.next_batch,
            batches: self.batches.clone(),
            entries,
        };
        let tmp = tmp_sibling(&self.index_path);
        write_file_synced(&tmp, &ix.encode()?)?;
        fs::rename(&tmp, &self.index_path).at(&self.index_path)
    }

    fn batch_end(&self, id: u64) -> u64 {
        self.batches
            .iter()
            .find(|b| b.id == id)
            .map_or(self.committed_len, |b| b.end)
    }
}

/// One batch of appends plus the sorted lookups that feed it.
pub struct MergePass<'s> {
    store: &'s mut MrbgStore,
    reader: ChunkReader,
    batch: u64,
    buf: Vec<u8>,
    buf_start: u64,
    updates: Vec<(Vec<u8>, Option<IndexEntry>)>,
    counters: StoreCounters,
    finished: bool,
}

impl MergePass<'_> {
    /// Stored chunk for the `cursor`-th pass key as of the pass start.
    pub fn query(&mut self, cursor: usize) -> Result<Option<Chunk>> {
        let store = &*self.store;
        self.reader.query(
            cursor,
            &store.data,
            &store.data_path,
            store.committed_len,
            |id| store.batch_end(id),
            &mut self.counters,
        )
    }

    pub fn put(&mut self, chunk: &Chunk) -> Result<()> {
        if chunk.is_empty() {
            return self.remove(&chunk.k2);
        }
        let offset = self.buf_start + self.buf.len() as u64;
        let before = self.buf.len();
        chunk.encode_frame(self.batch, &mut self.buf)?;
        let len = (self.buf.len() - before) as u64;
        self.updates.push((
            chunk.k2.clone(),
            Some(IndexEntry {
                batch: self.batch,
                offset,
                len,
            }),
        ));
        self.counters.chunks_written += 1;
        self.counters.bytes_written += len;
        self.maybe_flush()
    }

    /// Drops `k2` from the index. A zero-edge frame is still appended so
    /// that an index rebuilt from the data file sees the removal.
    pub fn remove(&mut self, k2: &[u8]) -> Result<()> {
        Chunk::new(k2).encode_frame(self.batch, &mut self.buf)?;
        self.updates.push((k2.to_vec(), None));
        self.maybe_flush()
    }

    fn maybe_flush(&mut self) -> Result<()> {
        if self.buf.len() >= self.store.config.append_buffer {
            self.flush_buf()?;
        }
        Ok(())
    }

    fn flush_buf(&mut self) -> Result<()> {
        if self.buf.is_empty() {
            return Ok(());
        }
        let store = &*self.store;
        let res = (&store.data)
            .seek(SeekFrom::Start(self.buf_start))
            .and_then(|_| (&store.data).write_all(&self.buf));
        if let Err(e) = res {
            self.store.dirty = true;
            return Err(Error::io(&self.store.data_path, e));
        }
        self.buf_start += self.buf.len() as u64;
        self.buf.clear();
        Ok(())
    }

    pub fn read_log(&self) -> &[ReadEvent] {
        &self.reader.read_log
    }

    pub fn planned(&self) -> &[Option<IndexEntry>] {
        self.reader.plan()
    }

    /// Writes pending appends and atomically publishes the new index.
    pub fn finish(mut self) -> Result<()> {
        self.finished = true;
        let res = self.commit();
        if res.is_err() {
            self.store.dirty = true;
        }
        res
    }

    fn commit(&mut self) -> Result<()> {
        self.flush_buf()?;
        let store = &mut *self.store;
        store.counters.add(&self.counters);
        store.counters.passes += 1;
        store.last_reads = std::mem::take(&mut self.reader.read_log);
        if self.updates.is_empty() {
            return Ok(());
        }
        store.data.sync_data().at(&store.data_path)?;
        let start = store.committed_len;
        for (k2, entry) in self.updates.drain(..) {
            match entry {
                Some(e) => store.index.insert(k2, e),
                None => store.index.remove(&k2),
            };
        }
        store.batches.push(BatchMeta {
            id: self.batch,
            start,
            end: self.buf_start,
        });
        store.committed_len = self.buf_start;
        store.next_batch = self.batch + 1;
        store.write_index()
    }
}

impl Drop for MergePass<'_> {
    fn drop(&mut self) {
        if !self.finished && !self.updates.is_empty() {
            // Appends without a published index: force a reopen.
            self.store.dirty = true;
        }
    }
}

struct IndexFile {
    generation: u64,
    committed_len: u64,
    next_batch: u64,
    batches: Vec<BatchMeta>,
    entries: Vec<(Vec<u8>, IndexEntry)>,
}

impl IndexFile {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + self.entries.len() * 40);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_be_bytes());
        out.extend_from_slice(&self.generation.to_be_bytes());
        out.extend_from_slice(&self.committed_len.to_be_bytes());
        out.extend_from_slice(&self.next_batch.to_be_bytes());
        out.extend_from_slice(&check_len("batch table", self.batches.len())?.to_be_bytes());
        for b in &self.batches {
            out.extend_from_slice(&b.id.to_be_bytes());
            out.extend_from_slice(&b.start.to_be_bytes());
            out.extend_from_slice(&b.end.to_be_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u64).to_be_bytes());
        for (k, e) in &self.entries {
            out.extend_from_slice(&check_len("k2", k.len())?.to_be_bytes());
            out.extend_from_slice(k);
            out.extend_from_slice(&e.batch.to_be_bytes());
            out.extend_from_slice(&e.offset.to_be_bytes());
            out.extend_from_slice(&e.len.to_be_bytes());
        }
        Ok(out)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes, 0);
        if cur.take(4)? != INDEX_MAGIC {
            return Err(Error::corrupt(0, "bad index magic"));
        }
        let version = cur.u16()?;
        if version != STORE_VERSION {
            return Err(Error::corrupt(4, format!("unsupported index version {version}")));
        }
        let generation = cur.u64()?;
        let committed_len = cur.u64()?;
        let next_batch = cur.u64()?;
        let nbatches = cur.u32()?;
        let mut batches = Vec::with_capacity(nbatches as usize);
        for _ in 0..nbatches {
            batches.push(BatchMeta {
                id: cur.u64()?,
                start: cur.u64()?,
                end: cur.u64()?,
            });
        }
        let n = cur.u64()?;
        let mut entries = Vec::with_capacity(n.min(1 << 20) as usize);
        for _ in 0..n {
            let k = cur.bytes()?;
            entries.push((
                k,
                IndexEntry {
                    batch: cur.u64()?,
                    offset: cur.u64()?,
                    len: cur.u64()?,
                },
            ));
        }
        cur.finish()?;
        Ok(IndexFile {
            generation,
            committed_len,
            next_batch,
            batches,
            entries,
        })
    }
}

fn compact_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".compact");
    path.with_file_name(name)
}

fn parse_data_header(bytes: &[u8]) -> Option<u64> {
    if bytes.len() < DATA_HEADER_LEN as usize || &bytes[..4] != DATA_MAGIC {
        return None;
    }
    if u16::from_be_bytes([bytes[4], bytes[5]]) != STORE_VERSION {
        return None;
    }
    Some(u64::from_be_bytes(bytes[6..14].try_into().ok()?))
}

fn read_data_generation(path: &Path) -> Result<Option<u64>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut head = [0u8; DATA_HEADER_LEN as usize];
    if read_exact_at(&file, &mut head, 0).is_err() {
        return Ok(None);
    }
    Ok(parse_data_header(&head))
}

fn write_file_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).at(path)?;
    f.write_all(bytes).at(path)?;
    f.sync_all().at(path)
}
