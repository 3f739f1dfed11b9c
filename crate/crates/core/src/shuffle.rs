//! Map-side buffering with spill-to-disk and the reduce-side k-way merge.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::Result;
use crate::partition::Partitioner;
use crate::record::MrbgEdge;
use crate::run::{RunIter, RunReader, RunWriter};

/// Default in-memory budget per map task before sorted runs spill to disk.
pub const DEFAULT_SPILL_BUDGET: usize = 64 << 20;

/// A sorted stream of edges for one reduce partition. Cloning is cheap, so
/// a reduce attempt can be repeated over the same map outputs.
#[derive(Debug, Clone)]
pub enum RunSource {
    Memory(Arc<Vec<MrbgEdge>>),
    File(PathBuf),
}

/// Everything one map task produced, bucketed by reduce partition.
#[derive(Debug, Default)]
pub struct MapOutput {
    pub partitions: Vec<Vec<RunSource>>,
    pub records: u64,
    pub bytes: u64,
    pub spills: usize,
}

/// Buffers a map task's edges by reduce partition, spilling sorted runs
/// once the buffered encoded size reaches the budget.
pub struct MapOutputBuffer {
    partitioner: Partitioner,
    buckets: Vec<Vec<MrbgEdge>>,
    spilled: Vec<Vec<RunSource>>,
    buffered: usize,
    budget: usize,
    spill_dir: PathBuf,
    tag: String,
    spill_seq: usize,
    records: u64,
    bytes: u64,
}

impl MapOutputBuffer {
    /// `tag` makes spill file names unique per task attempt.
    pub fn new(partitioner: Partitioner, budget: usize, spill_dir: impl AsRef<Path>, tag: impl Into<String>) -> Self {
        let n = partitioner.count();
        MapOutputBuffer {
            partitioner,
            buckets: (0..n).map(|_| Vec::new()).collect(),
            spilled: (0..n).map(|_| Vec::new()).collect(),
            buffered: 0,
            budget: budget.max(1),
            spill_dir: spill_dir.as_ref().to_path_buf(),
            tag: tag.into(),
            spill_seq: 0,
            records: 0,
            bytes: 0,
        }
    }

    pub fn push(&mut self, edge: MrbgEdge) -> Result<()> {
        let len = edge.encoded_len();
        self.records += 1;
        self.bytes += len as u64;
        self.buffered += len;
        let p = self.partitioner.partition_of(&edge.k2);
        self.buckets[p].push(edge);
        if self.buffered >= self.budget {
            self.spill()?;
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<()> {
        for (p, bucket) in self.buckets.iter_mut().enumerate() {
            if bucket.is_empty() {
                continue;
            }
            bucket.sort_by(MrbgEdge::shuffle_cmp);
            let path = self
                .spill_dir
                .join(format!("{}-p{p}-s{}.run", self.tag, self.spill_seq));
            let mut w = RunWriter::create(&path, 0)?;
            for e in bucket.drain(..) {
                w.append(&e)?;
            }
            w.finish()?;
            self.spilled[p].push(RunSource::File(path));
        }
        self.spill_seq += 1;
        self.buffered = 0;
        Ok(())
    }

    pub fn finish(mut self) -> MapOutput {
        let spills = self.spill_seq;
        for (p, mut bucket) in self.buckets.drain(..).enumerate() {
            if !bucket.is_empty() {
                bucket.sort_by(MrbgEdge::shuffle_cmp);
                self.spilled[p].push(RunSource::Memory(Arc::new(bucket)));
            }
        }
        MapOutput {
            partitions: self.spilled,
            records: self.records,
            bytes: self.bytes,
            spills,
        }
    }
}

/// Regroups map outputs so entry `p` holds every run destined for reduce
/// partition `p`, ordered by map task.
pub fn collect_partitions(outputs: Vec<MapOutput>, n: usize) -> Vec<Vec<RunSource>> {
    let mut by_partition: Vec<Vec<RunSource>> = (0..n).map(|_| Vec::new()).collect();
    for out in outputs {
        for (p, sources) in out.partitions.into_iter().enumerate() {
            by_partition[p].extend(sources);
        }
    }
    by_partition
}

enum SourceIter {
    Memory(Arc<Vec<MrbgEdge>>, usize),
    File(RunIter<MrbgEdge>),
}

impl SourceIter {
    fn next(&mut self) -> Option<Result<MrbgEdge>> {
        match self {
            SourceIter::Memory(v, i) => {
                let e = v.get(*i)?.clone();
                *i += 1;
                Some(Ok(e))
            }
            SourceIter::File(it) => it.next(),
        }
    }
}

struct HeapItem {
    edge: MrbgEdge,
    source: usize,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .edge
            .shuffle_cmp(&self.edge)
            .then_with(|| other.source.cmp(&self.source))
    }
}

/// K-way merge of sorted sources into one `(K2, MK)`-ordered stream.
pub struct MergeIter {
    sources: Vec<SourceIter>,
    heap: BinaryHeap<HeapItem>,
    failed: bool,
}

impl MergeIter {
    pub fn new(sources: Vec<RunSource>) -> Result<Self> {
        let mut iters = Vec::with_capacity(sources.len());
        for s in sources {
            iters.push(match s {
                RunSource::Memory(v) => SourceIter::Memory(v, 0),
                RunSource::File(path) => SourceIter::File(RunReader::<MrbgEdge>::open(&path)?.iter()?),
            });
        }
        let mut heap = BinaryHeap::with_capacity(iters.len());
        for (i, it) in iters.iter_mut().enumerate() {
            if let Some(edge) = it.next() {
                heap.push(HeapItem { edge: edge?, source: i });
            }
        }
        Ok(MergeIter {
            sources: iters,
            heap,
            failed: false,
        })
    }
}

impl Iterator for MergeIter {
    type Item = Result<MrbgEdge>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let top = self.heap.pop()?;
        match self.sources[top.source].next() {
            Some(Ok(edge)) => self.heap.push(HeapItem {
                edge,
                source: top.source,
            }),
            Some(Err(e)) => {
                self.failed = true;
                return Some(Err(e));
            }
            None => {}
        }
        Some(Ok(top.edge))
    }
}

/// Groups a `(K2, MK)`-sorted edge stream into `(K2, edges)` runs; a new
/// group starts exactly where K2 changes.
pub struct GroupByKey<I> {
    inner: I,
    pending: Option<MrbgEdge>,
}

impl<I: Iterator<Item = Result<MrbgEdge>>> GroupByKey<I> {
    pub fn new(inner: I) -> Self {
        GroupByKey { inner, pending: None }
    }
}

impl<I: Iterator<Item = Result<MrbgEdge>>> Iterator for GroupByKey<I> {
    type Item = Result<(Vec<u8>, Vec<MrbgEdge>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let first = match self.pending.take() {
            Some(e) => e,
            None => match self.inner.next()? {
                Ok(e) => e,
                Err(e) => return Some(Err(e)),
            },
        };
        let key = first.k2.clone();
        let mut group = vec![first];
        loop {
            match self.inner.next() {
                Some(Ok(e)) if e.k2 == key => group.push(e),
                Some(Ok(e)) => {
                    self.pending = Some(e);
                    break;
                }
                Some(Err(e)) => return Some(Err(e)),
                None => break,
            }
        }
        Some(Ok((key, group)))
    }
}

/// Merges the runs for one reduce partition and groups them by K2.
pub fn shuffle_sort(sources: Vec<RunSource>) -> Result<GroupByKey<MergeIter>> {
    Ok(GroupByKey::new(MergeIter::new(sources)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::MapKey;

    fn e(k: &str, p: u32, s: u64) -> MrbgEdge {
        MrbgEdge::valued(k, MapKey::new(p, s), format!("{p}.{s}"))
    }

    #[test]
    fn merges_interleaved_map_outputs() {
        let a = vec![e("a", 0, 0), e("c", 0, 1), e("e", 0, 2)];
        let b = vec![e("b", 1, 0), e("c", 1, 1), e("d", 1, 2)];
        let merged: Vec<MrbgEdge> = MergeIter::new(vec![RunSource::Memory(Arc::new(a.clone())), RunSource::Memory(Arc::new(b.clone()))])
            .unwrap()
            .map(Result::unwrap)
            .collect();
        let mut expected: Vec<MrbgEdge> = a.into_iter().chain(b).collect();
        expected.sort_by(MrbgEdge::shuffle_cmp);
        assert_eq!(merged, expected);
    }

    #[test]
    fn single_key_many_mappers_one_group() {
        let sources = (0..5u32)
            .rev()
            .map(|p| RunSource::Memory(Arc::new(vec![e("k", p, 0)])))
            .collect();
        let groups: Vec<_> = shuffle_sort(sources).unwrap().map(Result::unwrap).collect();
        assert_eq!(groups.len(), 1);
        let order: Vec<u32> = groups[0].1.iter().map(|e| e.map_key.partition).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn spilled_and_memory_runs_merge_identically() {
        let dir = tempfile::tempdir().unwrap();
        let part = Partitioner::new(3);
        let edges: Vec<MrbgEdge> = (0..500u64)
            .map(|i| e(&format!("k{}", (i * 7919) % 97), 0, i))
            .collect();
        let mut small = MapOutputBuffer::new(part, 256, dir.path(), "t0");
        let mut big = MapOutputBuffer::new(part, usize::MAX, dir.path(), "t1");
        for edge in &edges {
            small.push(edge.clone()).unwrap();
            big.push(edge.clone()).unwrap();
        }
        let small = small.finish();
        let big = big.finish();
        assert!(small.spills > 0);
        assert_eq!(big.spills, 0);
        let a = collect_partitions(vec![small], 3);
        let b = collect_partitions(vec![big], 3);
        for (sa, sb) in a.into_iter().zip(b) {
            let x: Vec<_> = MergeIter::new(sa).unwrap().map(Result::unwrap).collect();
            let y: Vec<_> = MergeIter::new(sb).unwrap().map(Result::unwrap).collect();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn partitions_are_disjoint() {
        let part = Partitioner::new(4);
        let dir = tempfile::tempdir().unwrap();
        let mut buf = MapOutputBuffer::new(part, usize::MAX, dir.path(), "t");
        for i in 0..200u64 {
            buf.push(e(&format!("key{i}"), 0, i)).unwrap();
        }
        let parts = collect_partitions(vec![buf.finish()], 4);
        for (p, sources) in parts.into_iter().enumerate() {
            for edge in MergeIter::new(sources).unwrap() {
                assert_eq!(part.partition_of(&edge.unwrap().k2), p);
            }
        }
    }
}
