//! Seeded synthetic inputs and deltas. The same seed and parameters always
//! produce byte-identical files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use imr_apps::codec::{fmt_adjacency, fmt_vec, parse_adjacency, parse_vec, Neighbor};
use imr_apps::gimv::block_key;
use imr_core::record::{DeltaRecord, KvRecord, MapKey};
use imr_core::run::{list_runs, write_sorted_run, RunReader};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::Serialize;

use crate::apps::AppKind;

#[derive(Args, Debug, Clone, PartialEq)]
pub struct DataParams {
    /// Documents or points.
    #[arg(long, default_value_t = 10_000)]
    pub records: usize,
    #[arg(long, default_value_t = 1_000)]
    pub vertices: usize,
    /// Out-degree of every generated vertex.
    #[arg(long, default_value_t = 10)]
    pub degree: usize,
    #[arg(long, default_value_t = 1_000)]
    pub vocab: usize,
    /// Maximum words per document.
    #[arg(long, default_value_t = 20)]
    pub doc_len: usize,
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
    /// Gaussian clusters the points are drawn from.
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    /// Matrix blocks per side.
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub block_size: usize,
    /// Input files to split the records across.
    #[arg(long, default_value_t = 1)]
    pub files: usize,
}

impl Default for DataParams {
    fn default() -> Self {
        DataParams {
            records: 10_000,
            vertices: 1_000,
            degree: 10,
            vocab: 1_000,
            doc_len: 20,
            dims: 2,
            clusters: 4,
            blocks: 4,
            block_size: 4,
            files: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DataSummary {
    pub records: usize,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeltaSummary {
    /// Base records deleted or updated.
    pub touched: usize,
    pub deletes: usize,
    pub updates: usize,
    pub inserts: usize,
    pub delta: PathBuf,
    /// Base plus delta, for recompute oracles.
    pub updated: PathBuf,
}

/// Vertex ids for generated graphs.
pub fn vertex_id(i: usize) -> String {
    i.to_string()
}

fn doc_id(i: usize) -> String {
    format!("d{i:07}")
}

fn point_id(i: usize) -> String {
    format!("p{i:07}")
}

fn word(rank: usize) -> String {
    format!("w{rank}")
}

struct DocGen {
    zipf: Zipf<f64>,
    max_len: usize,
}

impl DocGen {
    fn new(p: &DataParams) -> anyhow::Result<Self> {
        if p.vocab == 0 || p.doc_len == 0 {
            bail!("vocab and doc-len must be positive");
        }
        Ok(DocGen {
            zipf: Zipf::new(p.vocab as f64, 1.0).context("word distribution")?,
            max_len: p.doc_len,
        })
    }

    fn doc(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let len = rng.random_range(1..=self.max_len);
        (0..len)
            .map(|_| word(self.zipf.sample(rng) as usize - 1))
            .collect::<Vec<_>>()
            .join(" ")
            .into_bytes()
    }
}

fn out_edges(rng: &mut ChaCha8Rng, i: usize, n: usize, degree: usize, weighted: bool) -> Vec<Neighbor> {
    let degree = degree.min(n.saturating_sub(1));
    let mut targets = BTreeSet::new();
    while targets.len() < degree {
        let j = rng.random_range(0..n);
        if j != i {
            targets.insert(j);
        }
    }
    targets
        .into_iter()
        .map(|j| Neighbor {
            id: vertex_id(j),
            weight: weighted.then(|| random_weight(rng)),
        })
        .collect()
}

fn random_weight(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(1..=10) as f64
}

fn weighted(app: AppKind) -> bool {
    matches!(app, AppKind::Sssp | AppKind::Inedge)
}

/// Column-stochastic dense matrix cut into `blocks x blocks` blocks.
fn matrix_blocks(rng: &mut ChaCha8Rng, blocks: usize, b: usize) -> Vec<KvRecord> {
    let n = blocks * b;
    let mut m = vec![vec![0.0; n]; n];
    for c in 0..n {
        let col: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let sum: f64 = col.iter().sum();
        for (row, x) in m.iter_mut().zip(&col) {
            row[c] = x / sum;
        }
    }
    let mut out = Vec::new();
    for bi in 0..blocks {
        for bj in 0..blocks {
            let vals: Vec<f64> = (0..b * b).map(|x| m[bi * b + x / b][bj * b + x % b]).collect();
            out.push(KvRecord::new(block_key(bi, bj), fmt_vec(&vals)));
        }
    }
    out
}

fn write_split(out: &Path, mut records: Vec<KvRecord>, files: usize) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for old in list_runs(out)? {
        fs::remove_file(&old)?;
    }
    records.sort();
    let files = files.max(1);
    let per = records.len().div_ceil(files).max(1);
    let mut paths = Vec::new();
    for (i, chunk) in records.chunks(per).enumerate() {
        let path = out.join(format!("part-{i:05}.run"));
        write_sorted_run(&path, 0, chunk)?;
        paths.push(path);
    }
    if paths.is_empty() {
        let path = out.join("part-00000.run");
        write_sorted_run(&path, 0, &[] as &[KvRecord])?;
        paths.push(path);
    }
    Ok(paths)
}

/// Candidate pairs for paircount: all pairs of the ten most frequent words.
pub fn default_candidates(vocab: usize) -> String {
    let top = vocab.min(10);
    let mut out = String::new();
    for a in 0..top {
        for b in a + 1..top {
            out.push_str(&format!("{},{}\n", word(a), word(b)));
        }
    }
    out
}

pub fn gen_data(app: AppKind, p: &DataParams, seed: u64, out: &Path) -> anyhow::Result<DataSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<KvRecord> = match app {
        AppKind::Wordcount | AppKind::Paircount => {
            let gen = DocGen::new(p)?;
            (0..p.records).map(|i| KvRecord::new(doc_id(i), gen.doc(&mut rng))).collect()
        }
        AppKind::Pagerank | AppKind::Sssp | AppKind::Inedge => {
            if p.vertices < 2 || p.degree == 0 {
                bail!("graphs need at least 2 vertices and out-degree 1");
            }
            (0..p.vertices)
                .map(|i| {
                    let edges = out_edges(&mut rng, i, p.vertices, p.degree, weighted(app));
                    KvRecord::new(vertex_id(i), fmt_adjacency(&edges))
                })
                .collect()
        }
        AppKind::Kmeans => {
            if p.dims == 0 || p.clusters == 0 {
                bail!("points need positive dims and clusters");
            }
            let centers: Vec<Vec<f64>> = (0..p.clusters)
                .map(|_| (0..p.dims).map(|_| rng.random_range(-50.0..50.0)).collect())
                .collect();
            let noise = Normal::new(0.0, 1.0)?;
            (0..p.records)
                .map(|i| {
                    let c = &centers[rng.random_range(0..p.clusters)];
                    let pt: Vec<f64> = c.iter().map(|x| x + noise.sample(&mut rng)).collect();
                    KvRecord::new(point_id(i), fmt_vec(&pt))
                })
                .collect()
        }
        AppKind::Gimv => {
            if p.blocks == 0 || p.block_size == 0 {
                bail!("blocks and block-size must be positive");
            }
            matrix_blocks(&mut rng, p.blocks, p.block_size)
        }
    };
    let count = records.len();
    let files = write_split(out, records, p.files)?;
    if app == AppKind::Paircount {
        fs::write(out.join("candidates.txt"), default_candidates(p.vocab))?;
    }
    Ok(DataSummary { records: count, files })
}

/// Map key for the `seq`-th record inserted by delta `epoch`; disjoint
/// from the `(file index, position)` keys of base inputs.
pub fn fresh_map_key(epoch: u32, seq: u64) -> MapKey {
    MapKey::new(0x8000_0000 | epoch, seq)
}

/// Reads every base record with its map key `(file index, position)`.
pub fn read_base(dir: &Path) -> anyhow::Result<Vec<(MapKey, KvRecord)>> {
    let mut out = Vec::new();
    for (i, path) in list_runs(dir)?.into_iter().enumerate() {
        for (pos, rec) in RunReader::<KvRecord>::open(&path)?.read_all()?.into_iter().enumerate() {
            out.push((MapKey::new(i as u32, pos as u64), rec));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaParams {
    pub fraction: f64,
    pub seed: u64,
    pub epoch: u32,
    pub insert_only: bool,
}

/// Generates a delta against the base input in `base`. Exactly
/// `floor(fraction * N)` base records are touched: graph, point and matrix
/// records are updated in place (delete plus insert), documents are
/// deleted or replaced at random and half as many new documents are
/// inserted. With `insert_only`, no base record is touched and
/// `floor(fraction * N)` new records are inserted.
pub fn gen_delta(app: AppKind, base: &Path, d: &DeltaParams, p: &DataParams, out: &Path) -> anyhow::Result<DeltaSummary> {
    if !(0.0..=1.0).contains(&d.fraction) {
        bail!("change fraction {} outside [0, 1]", d.fraction);
    }
    if d.insert_only && app.is_iterative() {
        bail!("insert-only deltas are for one-step apps");
    }
    let records = read_base(base)?;
    let n = records.len();
    let m = (d.fraction * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let mut deltas: Vec<DeltaRecord> = Vec::new();
    let mut summary = DeltaSummary::default();
    let mut seq = 0u64;
    let mut fresh = || {
        seq += 1;
        fresh_map_key(d.epoch, seq - 1)
    };

    let touched: Vec<usize> = if d.insert_only {
        Vec::new()
    } else {
        let mut t = sample(&mut rng, n, m.min(n)).into_vec();
        t.sort_unstable();
        t
    };
    let mut removed = vec![false; n];
    let mut replacements: Vec<KvRecord> = Vec::new();
    let doc_gen = match app {
        AppKind::Wordcount | AppKind::Paircount => Some(DocGen::new(p)?),
        _ => None,
    };
    let noise = Normal::new(0.0, 1.0)?;
    for &i in &touched {
        let (mk, old) = &records[i];
        let new_value = match app {
            AppKind::Wordcount | AppKind::Paircount => {
                if rng.random_bool(0.5) {
                    deltas.push(DeltaRecord::delete(old.clone(), *mk));
                    removed[i] = true;
                    summary.deletes += 1;
                    continue;
                }
                doc_gen.as_ref().expect("docs").doc(&mut rng)
            }
            AppKind::Pagerank => {
                let mut edges = parse_adjacency(&old.value)?;
                let ids: BTreeSet<String> = edges.iter().map(|e| e.id.clone()).collect();
                if !edges.is_empty() && ids.len() + 1 < n {
                    let slot = rng.random_range(0..edges.len());
                    loop {
                        let j = vertex_id(rng.random_range(0..n));
                        if j.as_bytes() != old.key.as_slice() && !ids.contains(&j) {
                            edges[slot].id = j;
                            break;
                        }
                    }
                }
                fmt_adjacency(&edges)
            }
            AppKind::Sssp | AppKind::Inedge => {
                let mut edges = parse_adjacency(&old.value)?;
                for e in &mut edges {
                    e.weight = Some(random_weight(&mut rng));
                }
                fmt_adjacency(&edges)
            }
            AppKind::Kmeans => {
                let pt: Vec<f64> = parse_vec(&old.value)?.iter().map(|x| x + noise.sample(&mut rng)).collect();
                fmt_vec(&pt)
            }
            AppKind::Gimv => {
                let vals: Vec<f64> = parse_vec(&old.value)?
                    .iter()
                    .map(|x| x * rng.random_range(0.9..1.1))
                    .collect();
                fmt_vec(&vals)
            }
        };
        let new = KvRecord::new(old.key.clone(), new_value);
        deltas.push(DeltaRecord::delete(old.clone(), *mk));
        deltas.push(DeltaRecord::insert(new.clone(), fresh()));
        removed[i] = true;
        replacements.push(new);
        summary.updates += 1;
    }
    summary.touched = touched.len();

    let inserts = match (app, d.insert_only) {
        (_, true) => m,
        (AppKind::Wordcount | AppKind::Paircount, false) => m / 2,
        _ => 0,
    };
    for k in 0..inserts {
        let rec = match app {
            AppKind::Wordcount | AppKind::Paircount => {
                KvRecord::new(doc_id(n + k), doc_gen.as_ref().expect("docs").doc(&mut rng))
            }
            AppKind::Inedge => {
                let edges = out_edges(&mut rng, n + k, n + k + 1, p.degree, true);
                KvRecord::new(format!("n{k:07}"), fmt_adjacency(&edges))
            }
            other => bail!("insert-only deltas are not supported for {other}"),
        };
        deltas.push(DeltaRecord::insert(rec.clone(), fresh()));
        replacements.push(rec);
        summary.inserts += 1;
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    deltas.sort_by(|a, b| a.record.key.cmp(&b.record.key));
    let delta_path = out.join("delta.run");
    write_sorted_run(&delta_path, u64::from(d.epoch), &deltas)?;

    let mut updated: Vec<KvRecord> = records
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !removed[*i])
        .map(|(_, (_, r))| r)
        .collect();
    updated.extend(replacements);
    let updated_dir = out.join("updated");
    write_split(&updated_dir, updated, 1)?;
    summary.delta = delta_path;
    summary.updated = updated_dir;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use imr_core::record::Sign;

    fn small_graph(tmp: &Path) -> PathBuf {
        let dir = tmp.join("base");
        let p = DataParams {
            vertices: 50,
            degree: 3,
            ..Default::default()
        };
        gen_data(AppKind::Pagerank, &p, 1, &dir).unwrap();
        dir
    }

    #[test]
    fn zero_fraction_is_empty() {
        let tmp = tempfile::tempdir().unwrap();
        let base = small_graph(tmp.path());
        let d = DeltaParams {
            fraction: 0.0,
            seed: 3,
            epoch: 1,
            insert_only: false,
        };
        let s = gen_delta(AppKind::Pagerank, &base, &d, &DataParams::default(), &tmp.path().join("d")).unwrap();
        assert_eq!(s.touched, 0);
        assert!(RunReader::<DeltaRecord>::open(&s.delta).unwrap().read_all().unwrap().is_empty());
    }

    #[test]
    fn touches_exactly_floor_fraction() {
        let tmp = tempfile::tempdir().unwrap();
        let base = small_graph(tmp.path());
        let d = DeltaParams {
            fraction: 0.27,
            seed: 3,
            epoch: 1,
            insert_only: false,
        };
        let s = gen_delta(AppKind::Pagerank, &base, &d, &DataParams::default(), &tmp.path().join("d")).unwrap();
        assert_eq!(s.touched, 13);
        let recs = RunReader::<DeltaRecord>::open(&s.delta).unwrap().read_all().unwrap();
        assert_eq!(recs.iter().filter(|r| r.sign == Sign::Delete).count(), 13);
        assert!(gen_delta(
            AppKind::Pagerank,
            &base,
            &DeltaParams { fraction: 1.5, ..d },
            &DataParams::default(),
            &tmp.path().join("e")
        )
        .is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let p = DataParams {
            records: 200,
            ..Default::default()
        };
        gen_data(AppKind::Wordcount, &p, 7, &tmp.path().join("a")).unwrap();
        gen_data(AppKind::Wordcount, &p, 7, &tmp.path().join("b")).unwrap();
        let read = |d: &str| fs::read(tmp.path().join(d).join("part-00000.run")).unwrap();
        assert_eq!(read("a"), read("b"));
        let d = DeltaParams {
            fraction: 0.2,
            seed: 4,
            epoch: 1,
            insert_only: false,
        };
        let x = gen_delta(AppKind::Wordcount, &tmp.path().join("a"), &d, &p, &tmp.path().join("x")).unwrap();
        let y = gen_delta(AppKind::Wordcount, &tmp.path().join("a"), &d, &p, &tmp.path().join("y")).unwrap();
        assert_eq!(fs::read(x.delta).unwrap(), fs::read(y.delta).unwrap());
    }
}
