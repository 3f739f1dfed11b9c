//! Job instrumentation: JSON-lines event log and the per-iteration CSV.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::mrbg::StoreCounters;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub job: String,
    pub stage: String,
    pub wall_ms: f64,
    pub records_in: u64,
    pub records_out: u64,
    pub bytes_shuffled: u64,
}

/// One row per iteration of an iterative or incremental iterative job.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub l1_delta: f64,
    pub wall_ms: f64,
    pub bytes_shuffled: u64,
    pub map_invocations: u64,
    pub reduce_invocations: u64,
    /// State kv-pairs emitted to the next iteration.
    pub propagated: u64,
    pub p_delta: f64,
    pub mrbg_enabled: bool,
    pub state_keys: u64,
    pub backward_shuffle_bytes: u64,
    pub replicated_bytes: u64,
    pub checkpoint_ms: f64,
    pub checkpoint_bytes: u64,
    pub recoveries: u64,
    pub store_reads: u64,
    pub store_bytes_read: u64,
    pub store_cache_hits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricEvent {
    Stage(StageMetrics),
    Iteration(IterationMetrics),
    Store {
        partition: usize,
        #[serde(flatten)]
        counters: StoreCounters,
    },
    Recovery {
        iteration: usize,
        kind: String,
        partition: usize,
        restored_from: usize,
    },
}

#[derive(Debug, Default, Clone)]
pub struct MetricsLog {
    pub events: Vec<MetricEvent>,
}

impl MetricsLog {
    pub fn push(&mut self, event: MetricEvent) {
        self.events.push(event);
    }

    pub fn stage(&mut self, job: &str, stage: &str, started: Instant, records_in: u64, records_out: u64, bytes_shuffled: u64) {
        self.push(MetricEvent::Stage(StageMetrics {
            job: job.to_string(),
            stage: stage.to_string(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            records_in,
            records_out,
            bytes_shuffled,
        }));
    }

    pub fn iterations(&self) -> impl Iterator<Item = &IterationMetrics> {
        self.events.iter().filter_map(|e| match e {
            MetricEvent::Iteration(m) => Some(m),
            _ => None,
        })
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.events.extend(other.events);
    }

    /// Appends all events to a JSON-lines file.
    pub fn append_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path).at(path)?;
        let mut out = BufWriter::new(file);
        for e in &self.events {
            serde_json::to_writer(&mut out, e).map_err(|e| Error::Metadata(e.to_string()))?;
            out.write_all(b"\n").at(path)?;
        }
        out.flush().at(path)
    }

    pub fn write_iterations_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).at(path)?;
        let mut w = csv::Writer::from_writer(file);
        for row in self.iterations() {
            w.serialize(row).map_err(|e| Error::Metadata(e.to_string()))?;
        }
        w.flush().at(path)
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<MetricEvent>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Metadata(e.to_string())))
        .collect()
}
