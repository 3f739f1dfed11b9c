//! Checkpointing, declarative failure injection and the task scheduler
//! that keeps each partition's prime map and prime reduce together.
//!
//! Checkpoint layout: `ckpt/<iteration>/<partition>/...` plus
//! `ckpt/<iteration>/manifest.json` holding a SHA-256 digest per file. A
//! checkpoint is assembled under a temporary name and published by a
//! directory rename after its manifest is written.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const MANIFEST: &str = "manifest.json";

/// Coordinator state that must roll back together with the files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunnerState {
    pub mrbg_active: bool,
    pub l1_trace: Vec<f64>,
    pub structure_delta_pending: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub partition: usize,
    /// Path relative to the partition directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub iteration: usize,
    pub partitions: usize,
    pub runner: RunnerState,
    pub files: Vec<FileDigest>,
}

impl Manifest {
    pub fn total_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.bytes).sum()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).at(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).at(path)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Regular files under `dir`, relative and sorted.
fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let abs = dir.join(&rel);
        for entry in fs::read_dir(&abs).at(&abs)? {
            let entry = entry.at(&abs)?;
            let child = rel.join(entry.file_name());
            if entry.file_type().at(entry.path())?.is_dir() {
                stack.push(child);
            } else {
                out.push(child);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Copies every file of `from` into `to`, replacing `to` entirely.
pub(crate) fn replace_dir(from: &Path, to: &Path) -> Result<()> {
    if to.exists() {
        fs::remove_dir_all(to).at(to)?;
    }
    fs::create_dir_all(to).at(to)?;
    for rel in walk_files(from)? {
        let dst = to.join(&rel);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        fs::copy(from.join(&rel), &dst).at(&dst)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
    keep: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckpointCost {
    pub bytes: u64,
    pub millis: f64,
}

impl CheckpointStore {
    /// Keeps the newest `keep` checkpoints (at least 2, so a corrupt latest
    /// one still has a fallback).
    pub fn new(root: impl AsRef<Path>, keep: usize) -> Self {
        CheckpointStore {
            root: root.as_ref().to_path_buf(),
            keep: keep.max(2),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, iteration: usize) -> PathBuf {
        self.root.join(iteration.to_string())
    }

    /// Snapshots every partition directory for `iteration`.
    pub fn write(&self, iteration: usize, partition_dirs: &[PathBuf], runner: &RunnerState) -> Result<CheckpointCost> {
        let started = std::time::Instant::now();
        let staging = self.root.join(format!(".{iteration}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging).at(&staging)?;
        }
        let mut files = Vec::new();
        for (p, dir) in partition_dirs.iter().enumerate() {
            let dst = staging.join(p.to_string());
            replace_dir(dir, &dst)?;
            for rel in walk_files(&dst)? {
                let path = dst.join(&rel);
                files.push(FileDigest {
                    partition: p,
                    path: rel_string(&rel),
                    bytes: fs::metadata(&path).at(&path)?.len(),
                    sha256: sha256_file(&path)?,
                });
            }
        }
        let manifest = Manifest {
            iteration,
            partitions: partition_dirs.len(),
            runner: runner.clone(),
            files,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Metadata(e.to_string()))?;
        let mpath = staging.join(MANIFEST);
        fs::write(&mpath, text).at(&mpath)?;
        let final_dir = self.dir(iteration);
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).at(&final_dir)?;
        }
        fs::rename(&staging, &final_dir).at(&final_dir)?;
        self.prune()?;
        Ok(CheckpointCost {
            bytes: manifest.total_bytes(),
            millis: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Published checkpoint iterations, ascending.
    pub fn list(&self) -> Result<Vec<usize>> {
        if !self.root.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<usize> = fs::read_dir(&self.root)
            .at(&self.root)?
            .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    fn prune(&self) -> Result<()> {
        let all = self.list()?;
        if all.len() > self.keep {
            for it in &all[..all.len() - self.keep] {
                let d = self.dir(*it);
                fs::remove_dir_all(&d).at(&d)?;
            }
        }
        Ok(())
    }

    /// Loads the manifest of `iteration` and checks every digest.
    pub fn verify(&self, iteration: usize) -> Result<Manifest> {
        let dir = self.dir(iteration);
        let reject = |reason: String| Error::CheckpointRejected { iteration, reason };
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| reject(format!("manifest unreadable: {e}")))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| reject(format!("manifest invalid: {e}")))?;
        for f in &manifest.files {
            let path = dir.join(f.partition.to_string()).join(&f.path);
            let digest = sha256_file(&path).map_err(|e| reject(e.to_string()))?;
            if digest != f.sha256 {
                return Err(reject(format!("digest mismatch for partition {} file {}", f.partition, f.path)));
            }
        }
        Ok(manifest)
    }

    /// Newest checkpoint at or before `iteration` whose digests verify.
    pub fn latest_valid(&self, iteration: usize) -> Result<Option<(usize, Manifest)>> {
        for it in self.list()?.into_iter().rev().filter(|i| *i <= iteration) {
            match self.verify(it) {
                Ok(m) => return Ok(Some((it, m))),
                Err(e) => log::warn!("{e}"),
            }
        }
        Ok(None)
    }

    pub fn restore_partition(&self, iteration: usize, partition: usize, dest: &Path) -> Result<()> {
        replace_dir(&self.dir(iteration).join(partition.to_string()), dest)
    }

    pub fn restore_all(&self, iteration: usize, dests: &[PathBuf]) -> Result<()> {
        for (p, d) in dests.iter().enumerate() {
            self.restore_partition(iteration, p, d)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    PrimeMap,
    PrimeReduce,
    Worker,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedFailure {
    pub kind: FailureKind,
    pub iteration: usize,
    /// Target partition for task failures.
    #[serde(default)]
    pub partition: usize,
    /// Target worker for worker failures.
    #[serde(default)]
    pub worker: usize,
}

/// Failures to inject, each firing once at its iteration's barrier.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailurePlan {
    pub failures: Vec<InjectedFailure>,
    #[serde(skip)]
    fired: Vec<bool>,
}

impl FailurePlan {
    pub fn new(failures: Vec<InjectedFailure>) -> Self {
        FailurePlan {
            fired: vec![false; failures.len()],
            failures,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).at(path)?;
        let plan: FailurePlan =
            serde_json::from_str(&text).map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))?;
        Ok(FailurePlan::new(plan.failures))
    }

    /// Takes the unfired failures of `kind` at `iteration`.
    pub fn take(&mut self, kind: FailureKind, iteration: usize) -> Vec<InjectedFailure> {
        self.fired.resize(self.failures.len(), false);
        let mut out = Vec::new();
        for (f, fired) in self.failures.iter().zip(self.fired.iter_mut()) {
            if !*fired && f.kind == kind && f.iteration == iteration {
                *fired = true;
                out.push(f.clone());
            }
        }
        out
    }

    pub fn pending(&self) -> usize {
        self.failures.len() - self.fired.iter().filter(|f| **f).count()
    }
}

/// Worker assignment for each partition's prime map and prime reduce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduler {
    healthy: Vec<bool>,
    map_assign: Vec<usize>,
    reduce_assign: Vec<usize>,
}

impl Scheduler {
    pub fn new(workers: usize, partitions: usize) -> Self {
        let workers = workers.max(1);
        let assign: Vec<usize> = (0..partitions).map(|p| p % workers).collect();
        Scheduler {
            healthy: vec![true; workers],
            map_assign: assign.clone(),
            reduce_assign: assign,
        }
    }

    pub fn map_assignment(&self) -> &[usize] {
        &self.map_assign
    }

    pub fn reduce_assignment(&self) -> &[usize] {
        &self.reduce_assign
    }

    pub fn is_healthy(&self, worker: usize) -> bool {
        self.healthy.get(worker).copied().unwrap_or(false)
    }

    /// Marks `worker` dead and moves each of its partitions, map and
    /// reduce together, to the healthy worker with the fewest partitions.
    /// Returns the moved partitions.
    pub fn fail_worker(&mut self, worker: usize) -> Result<Vec<usize>> {
        if worker < self.healthy.len() {
            self.healthy[worker] = false;
        }
        let moved: Vec<usize> = (0..self.map_assign.len())
            .filter(|&p| self.map_assign[p] == worker || self.reduce_assign[p] == worker)
            .collect();
        for &p in &moved {
            let target = (0..self.healthy.len())
                .filter(|&w| self.healthy[w])
                .min_by_key(|&w| (self.map_assign.iter().filter(|&&a| a == w).count(), w))
                .ok_or(Error::NoHealthyWorker(p))?;
            self.map_assign[p] = target;
            self.reduce_assign[p] = target;
        }
        Ok(moved)
    }

    /// Each partition's map and reduce run on the same healthy worker.
    pub fn colocated(&self) -> bool {
        self.map_assign
            .iter()
            .zip(&self.reduce_assign)
            .all(|(m, r)| m == r && self.is_healthy(*m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part_dirs(root: &Path, n: usize) -> Vec<PathBuf> {
        (0..n)
            .map(|p| {
                let d = root.join(format!("p{p}"));
                fs::create_dir_all(d.join("mrbg")).unwrap();
                fs::write(d.join("state.run"), format!("state {p}")).unwrap();
                fs::write(d.join("mrbg").join("mrbg.dat"), vec![p as u8; 100]).unwrap();
                d
            })
            .collect()
    }

    #[test]
    fn checkpoint_then_restore_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let dirs = part_dirs(tmp.path(), 2);
        let store = CheckpointStore::new(tmp.path().join("ckpt"), 3);
        let cost = store.write(1, &dirs, &RunnerState::default()).unwrap();
        assert!(cost.bytes > 0);
        fs::write(dirs[1].join("state.run"), "clobbered").unwrap();
        fs::remove_dir_all(dirs[1].join("mrbg")).unwrap();
        store.verify(1).unwrap();
        store.restore_partition(1, 1, &dirs[1]).unwrap();
        assert_eq!(fs::read_to_string(dirs[1].join("state.run")).unwrap(), "state 1");
        assert_eq!(fs::read(dirs[1].join("mrbg/mrbg.dat")).unwrap(), vec![1u8; 100]);
    }

    #[test]
    fn corrupt_checkpoint_falls_back() {
        let tmp = tempfile::tempdir().unwrap();
        let dirs = part_dirs(tmp.path(), 2);
        let store = CheckpointStore::new(tmp.path().join("ckpt"), 3);
        store.write(1, &dirs, &RunnerState::default()).unwrap();
        store.write(2, &dirs, &RunnerState::default()).unwrap();
        let victim = tmp.path().join("ckpt/2/0/mrbg/mrbg.dat");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[17] ^= 0x01;
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(store.verify(2), Err(Error::CheckpointRejected { iteration: 2, .. })));
        assert_eq!(store.latest_valid(2).unwrap().unwrap().0, 1);
    }

    #[test]
    fn prune_keeps_newest() {
        let tmp = tempfile::tempdir().unwrap();
        let dirs = part_dirs(tmp.path(), 1);
        let store = CheckpointStore::new(tmp.path().join("ckpt"), 2);
        for it in 0..5 {
            store.write(it, &dirs, &RunnerState::default()).unwrap();
        }
        assert_eq!(store.list().unwrap(), vec![3, 4]);
    }

    #[test]
    fn failed_worker_moves_pairs_together() {
        let mut s = Scheduler::new(3, 6);
        let moved = s.fail_worker(1).unwrap();
        assert_eq!(moved, vec![1, 4]);
        assert!(s.colocated());
        assert!(!s.map_assignment().contains(&1));
        let mut counts = [0; 3];
        for &w in s.map_assignment() {
            counts[w] += 1;
        }
        assert_eq!(counts, [3, 0, 3]);
    }

    #[test]
    fn last_worker_failure_aborts() {
        let mut s = Scheduler::new(1, 2);
        assert!(matches!(s.fail_worker(0), Err(Error::NoHealthyWorker(_))));
    }

    #[test]
    fn plan_fires_once() {
        let mut plan = FailurePlan::new(vec![InjectedFailure {
            kind: FailureKind::PrimeMap,
            iteration: 3,
            partition: 1,
            worker: 0,
        }]);
        assert!(plan.take(FailureKind::PrimeMap, 2).is_empty());
        assert_eq!(plan.take(FailureKind::PrimeMap, 3).len(), 1);
        assert!(plan.take(FailureKind::PrimeMap, 3).is_empty());
        assert_eq!(plan.pending(), 0);
    }

    #[test]
    fn plan_json_shape() {
        let text = r#"{"failures":[{"kind":"worker","iteration":7,"worker":1},{"kind":"prime_reduce","iteration":6,"partition":2}]}"#;
        let plan: FailurePlan = serde_json::from_str(text).unwrap();
        assert_eq!(plan.failures[0].kind, FailureKind::Worker);
        assert_eq!(plan.failures[1].partition, 2);
    }
}
