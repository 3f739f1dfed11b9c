//! Helpers shared by the apps integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use imr_apps::codec::{fmt_adjacency, parse_f64, Neighbor};
use imr_core::engine::JobSpec;
use imr_core::iterative::read_output_state;
use imr_core::record::{DeltaRecord, KvRecord, MapKey};
use imr_core::run::{list_runs, write_sorted_run, RunReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Graph = BTreeMap<String, Vec<(String, f64)>>;

pub fn write_records(path: &Path, mut records: Vec<KvRecord>) -> PathBuf {
    records.sort();
    write_sorted_run(path, 0, &records).unwrap();
    path.to_path_buf()
}

pub fn write_delta(path: &Path, mut delta: Vec<DeltaRecord>) -> PathBuf {
    // Stable: a delete stays ahead of the insert that replaces it.
    delta.sort_by(|a, b| a.record.key.cmp(&b.record.key));
    write_sorted_run(path, 1, &delta).unwrap();
    path.to_path_buf()
}

/// Map keys a job assigns to the records of one sorted input file.
pub fn map_keys(records: &[KvRecord]) -> BTreeMap<Vec<u8>, MapKey> {
    let mut sorted = records.to_vec();
    sorted.sort();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, r)| (r.key, MapKey::new(0, i as u64)))
        .collect()
}

pub fn fresh(sequence: u64) -> MapKey {
    MapKey::new(0x8000_0001, sequence)
}

pub fn job_output(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for path in list_runs(dir.join("output")).unwrap() {
        for rec in RunReader::<KvRecord>::open(&path).unwrap().read_all().unwrap() {
            out.insert(String::from_utf8(rec.key).unwrap(), String::from_utf8(rec.value).unwrap());
        }
    }
    out
}

pub fn numeric_state(dir: &Path) -> BTreeMap<String, f64> {
    read_output_state(dir.join("output"))
        .unwrap()
        .into_iter()
        .map(|(k, v)| (String::from_utf8(k).unwrap(), parse_f64(&v).unwrap()))
        .collect()
}

pub fn adjacency(edges: &[(String, f64)], weighted: bool) -> Vec<u8> {
    let n: Vec<Neighbor> = edges
        .iter()
        .map(|(id, w)| Neighbor {
            id: id.clone(),
            weight: weighted.then_some(*w),
        })
        .collect();
    fmt_adjacency(&n)
}

pub fn graph_records(g: &Graph, weighted: bool) -> Vec<KvRecord> {
    g.iter()
        .map(|(v, e)| KvRecord::new(v.as_bytes(), adjacency(e, weighted)))
        .collect()
}

/// `n` vertices with up to `degree` distinct out-edges each, integer
/// weights in 1..=10.
pub fn random_graph(seed: u64, n: usize, degree: usize) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut out: BTreeMap<String, f64> = BTreeMap::new();
            for _ in 0..degree {
                let j = rng.random_range(0..n);
                out.insert(j.to_string(), rng.random_range(1..=10) as f64);
            }
            (i.to_string(), out.into_iter().collect())
        })
        .collect()
}

pub fn iter_spec(partitions: usize, workers: usize) -> JobSpec {
    JobSpec {
        partitions,
        workers,
        max_iterations: 200,
        tolerance: 1e-10,
        ..Default::default()
    }
}

pub fn max_abs_diff(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter()
        .map(|(k, x)| {
            let y = b[k];
            if x == &y {
                0.0
            } else {
                (x - y).abs()
            }
        })
        .fold(0.0, f64::max)
}
