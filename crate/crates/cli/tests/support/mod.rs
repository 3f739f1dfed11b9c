//! Reference implementations used as oracles by the acceptance suite.
//! None of them share code with the engine beyond the run-file codec and
//! the app value formats.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::{Path, PathBuf};

use imr_apps::codec::{fmt_f64, parse_adjacency, parse_f64, parse_vec};
use imr_core::engine::{run_job, JobSpec, MapReduceApp};
use imr_core::record::{DeltaRecord, KvRecord};
use imr_core::result::Outputs;
use imr_core::run::{list_runs, write_sorted_run, RunReader};

pub type Table = BTreeMap<Vec<u8>, Vec<u8>>;

pub fn read_records(dir: &Path) -> anyhow::Result<Vec<KvRecord>> {
    let mut out = Vec::new();
    for path in list_runs(dir)? {
        out.extend(RunReader::<KvRecord>::open(&path)?.read_all()?);
    }
    Ok(out)
}

pub fn read_delta(path: &Path) -> anyhow::Result<Vec<DeltaRecord>> {
    Ok(RunReader::<DeltaRecord>::open(path)?.read_all()?)
}

/// Output file names and bytes, for byte-identity checks.
pub fn output_files(dir: &Path) -> anyhow::Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    for path in list_runs(dir)? {
        let name = PathBuf::from(path.file_name().expect("run file name"));
        out.push((name, std::fs::read(&path)?));
    }
    Ok(out)
}

// ---- word counting ----

pub fn word_counts<'a>(docs: impl IntoIterator<Item = &'a KvRecord>) -> Table {
    let mut counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    for doc in docs {
        let text = std::str::from_utf8(&doc.value).expect("utf-8 document");
        for w in text.split_whitespace() {
            *counts.entry(w.as_bytes().to_vec()).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(w, c)| (w, c.to_string().into_bytes()))
        .collect()
}

/// Distinct words of every document a delta deletes or inserts: the K2s
/// its map output touches.
pub fn affected_words(delta: &[DeltaRecord]) -> BTreeSet<Vec<u8>> {
    let mut out = BTreeSet::new();
    for d in delta {
        let text = std::str::from_utf8(&d.record.value).expect("utf-8 document");
        out.extend(text.split_whitespace().map(|w| w.as_bytes().to_vec()));
    }
    out
}

// ---- shortest paths ----

#[derive(PartialEq)]
struct Frontier(f64, String);

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Dijkstra over `(vertex, "j:w;...")` records. Every vertex that appears
/// as a record key or a neighbor gets a distance; unreachable is infinity.
pub fn dijkstra(graph: &[KvRecord], source: &str) -> anyhow::Result<BTreeMap<String, f64>> {
    let mut adj: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for rec in graph {
        let from = String::from_utf8(rec.key.clone())?;
        let mut edges = Vec::new();
        for n in parse_adjacency(&rec.value)? {
            edges.push((n.id.clone(), n.weight.expect("weighted graph")));
            adj.entry(n.id).or_default();
        }
        adj.entry(from).or_default().extend(edges);
    }
    let mut dist: BTreeMap<String, f64> = adj.keys().map(|k| (k.clone(), f64::INFINITY)).collect();
    let mut heap = BinaryHeap::new();
    dist.insert(source.to_string(), 0.0);
    heap.push(Frontier(0.0, source.to_string()));
    while let Some(Frontier(d, v)) = heap.pop() {
        if d > dist[&v] {
            continue;
        }
        for (u, w) in &adj[&v] {
            let nd = d + w;
            if nd < dist[u] {
                dist.insert(u.clone(), nd);
                heap.push(Frontier(nd, u.clone()));
            }
        }
    }
    Ok(dist)
}

// ---- k-means ----

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm until assignments stop changing. Ties go to the
/// lower centroid index; an empty cluster keeps its centroid.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_rounds: usize) -> Vec<Vec<f64>> {
    let mut assignment: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..max_rounds {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            for c in 1..centroids.len() {
                if sq_dist(p, &centroids[c]) < sq_dist(p, &centroids[best]) {
                    best = c;
                }
            }
            changed |= assignment[i] != best;
            assignment[i] = best;
        }
        if !changed {
            break;
        }
        let dims = centroids[0].len();
        let mut sums = vec![vec![0.0; dims]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..centroids.len() {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centroids
}

pub fn points(records: &[KvRecord]) -> anyhow::Result<Vec<Vec<f64>>> {
    records.iter().map(|r| parse_vec(&r.value)).collect()
}

// ---- PageRank as a chain of plain MapReduce jobs ----

/// Joins `S:<adjacency>` and `R:<rank>` records of one vertex into
/// `<rank>|<adjacency>`.
struct JoinRankAndLinks;

impl MapReduceApp for JoinRankAndLinks {
    fn name(&self) -> &str {
        "pagerank-join"
    }

    fn map(&self, key: &[u8], value: &[u8]) -> anyhow::Result<Vec<(Vec<u8>, Vec<u8>)>> {
        Ok(vec![(key.to_vec(), value.to_vec())])
    }

    fn reduce(&self, key: &[u8], values: &[&[u8]]) -> anyhow::Result<Outputs> {
        let mut rank = None;
        let mut links: Option<&[u8]> = None;
        for v in values {
            match v.split_first() {
                Some((b'R', rest)) => rank = Some(&rest[1..]),
                Some((b'S', rest)) => links = Some(&rest[1..]),
                _ => anyhow::bail!("untagged join value"),
            }
        }
        let (Some(rank), Some(links)) = (rank, links) else {
            anyhow::bail!("vertex {} lacks rank or links", String::from_utf8_lossy(key));
        };
        let mut out = rank.to_vec();
        out.push(b'|');
        out.extend_from_slice(links);
        Ok(vec![(key.to_vec(), out)])
    }
}

/// Spreads each rank over the out-links and applies damping.
struct SpreadRank {
    damping: f64,
}

impl MapReduceApp for SpreadRank {
    fn name(&self) -> &str {
        "pagerank-spread"
    }

    fn map(&self, key: &[u8], value: &[u8]) -> anyhow::Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let split = value.iter().position(|b| *b == b'|').expect("joined value");
        let rank = parse_f64(&value[..split])?;
        let links = parse_adjacency(&value[split + 1..])?;
        let mut out = Vec::with_capacity(links.len() + 1);
        for n in &links {
            out.push((n.id.as_bytes().to_vec(), fmt_f64(rank / links.len() as f64)));
        }
        // Keeps vertices without in-links in the output.
        if !links.iter().any(|n| n.id.as_bytes() == key) {
            out.push((key.to_vec(), Vec::new()));
        }
        Ok(out)
    }

    fn reduce(&self, key: &[u8], values: &[&[u8]]) -> anyhow::Result<Outputs> {
        let mut sum = 0.0;
        for v in values.iter().filter(|v| !v.is_empty()) {
            sum += parse_f64(v)?;
        }
        let mut out = b"R:".to_vec();
        out.extend(fmt_f64(self.damping * sum + (1.0 - self.damping)));
        Ok(vec![(key.to_vec(), out)])
    }
}

/// Ranks after each of `iterations` rounds, computed by two chained plain
/// jobs per round, starting from rank 1 everywhere.
pub fn chained_pagerank(
    graph: &[KvRecord],
    damping: f64,
    iterations: usize,
    workdir: &Path,
) -> anyhow::Result<Vec<BTreeMap<Vec<u8>, f64>>> {
    std::fs::create_dir_all(workdir)?;
    let spec = JobSpec {
        preserve_mrbg: false,
        ..Default::default()
    };
    let mut links: Vec<KvRecord> = graph
        .iter()
        .map(|r| KvRecord::new(r.key.clone(), [b"S:".as_slice(), &r.value].concat()))
        .collect();
    links.sort();
    let links_path = workdir.join("links.run");
    write_sorted_run(&links_path, 0, &links)?;
    let mut ranks: Vec<KvRecord> = graph.iter().map(|r| KvRecord::new(r.key.clone(), "R:1")).collect();
    ranks.sort();
    let mut rank_inputs = vec![workdir.join("ranks-0.run")];
    write_sorted_run(&rank_inputs[0], 0, &ranks)?;
    let mut history = Vec::new();
    for t in 1..=iterations {
        let join_dir = workdir.join(format!("join-{t}"));
        let mut inputs = vec![links_path.clone()];
        inputs.extend(rank_inputs.iter().cloned());
        let joined = run_job(&spec, &JoinRankAndLinks, &inputs, &join_dir)?;
        let spread_dir = workdir.join(format!("spread-{t}"));
        let spread = run_job(&spec, &SpreadRank { damping }, &joined.outputs, &spread_dir)?;
        let mut round = BTreeMap::new();
        for path in &spread.outputs {
            for rec in RunReader::<KvRecord>::open(path)?.read_all()? {
                round.insert(rec.key, parse_f64(&rec.value[2..])?);
            }
        }
        history.push(round);
        rank_inputs = spread.outputs;
    }
    Ok(history)
}

/// The same iteration as a dense in-memory loop.
pub fn dense_pagerank(graph: &[KvRecord], damping: f64, iterations: usize) -> anyhow::Result<Vec<BTreeMap<Vec<u8>, f64>>> {
    let index: BTreeMap<&[u8], usize> = graph.iter().enumerate().map(|(i, r)| (r.key.as_slice(), i)).collect();
    let mut out_links = Vec::with_capacity(graph.len());
    for r in graph {
        let ids: Vec<usize> = parse_adjacency(&r.value)?
            .iter()
            .map(|n| index[n.id.as_bytes()])
            .collect();
        out_links.push(ids);
    }
    let mut rank = vec![1.0; graph.len()];
    let mut history = Vec::new();
    for _ in 0..iterations {
        let mut incoming = vec![0.0; graph.len()];
        for (i, links) in out_links.iter().enumerate() {
            for &j in links {
                incoming[j] += rank[i] / links.len() as f64;
            }
        }
        rank = incoming.iter().map(|s| damping * s + (1.0 - damping)).collect();
        history.push(graph.iter().zip(&rank).map(|(r, x)| (r.key.clone(), *x)).collect());
    }
    Ok(history)
}

// ---- MRBGraph store model ----

/// In-memory model of the chunk store: K2 to its `(map key, value)` list.
pub type StoreModel = BTreeMap<Vec<u8>, BTreeMap<imr_core::record::MapKey, Vec<u8>>>;

pub fn relative_error(a: f64, b: f64) -> f64 {
    imr_cli::compare::relative_error(a, b)
}
