//! Per-partition reduce results keyed by K2, so an incremental refresh can
//! replace exactly the outputs of the reduce instances it re-ran.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::record::{check_len, Cursor, KvRecord};
use crate::run::{read_run_or_empty, write_sorted_run, RunWriter};

pub type Outputs = Vec<(Vec<u8>, Vec<u8>)>;

/// `u32 count | (u32 len | k3 | u32 len | v3)*`
pub fn encode_outputs(outputs: &[(Vec<u8>, Vec<u8>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&check_len("outputs", outputs.len())?.to_be_bytes());
    for (k, v) in outputs {
        out.extend_from_slice(&check_len("k3", k.len())?.to_be_bytes());
        out.extend_from_slice(k);
        out.extend_from_slice(&check_len("v3", v.len())?.to_be_bytes());
        out.extend_from_slice(v);
    }
    Ok(out)
}

pub fn decode_outputs(bytes: &[u8]) -> Result<Outputs> {
    let mut cur = Cursor::new(bytes, 0);
    let n = cur.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let k = cur.bytes()?;
        let v = cur.bytes()?;
        out.push((k, v));
    }
    cur.finish()?;
    Ok(out)
}

/// Reduce outputs of one partition, keyed by the K2 that produced them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartitionResults {
    pub by_k2: BTreeMap<Vec<u8>, Outputs>,
}

impl PartitionResults {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut by_k2 = BTreeMap::new();
        for rec in read_run_or_empty::<KvRecord>(path)? {
            by_k2.insert(rec.key, decode_outputs(&rec.value)?);
        }
        Ok(PartitionResults { by_k2 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = RunWriter::<KvRecord>::create(path, 0)?;
        for (k2, outputs) in &self.by_k2 {
            w.append(&KvRecord::new(k2.clone(), encode_outputs(outputs)?))?;
        }
        w.finish()?;
        Ok(())
    }

    /// Flattened plain-job output: every `(K3, V3)` sorted by key then value.
    pub fn flatten(&self) -> Vec<KvRecord> {
        let mut out: Vec<KvRecord> = self
            .by_k2
            .values()
            .flatten()
            .map(|(k, v)| KvRecord::new(k.clone(), v.clone()))
            .collect();
        out.sort();
        out
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        write_output(path, self.flatten())
    }
}

/// Writes sorted output records, rejecting empty K3s.
pub fn write_output(path: impl AsRef<Path>, mut records: Vec<KvRecord>) -> Result<()> {
    if records.iter().any(|r| r.key.is_empty()) {
        return Err(Error::EmptyKey);
    }
    records.sort();
    write_sorted_run(path, 0, &records)?;
    Ok(())
}
