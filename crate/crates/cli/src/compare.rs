//! Key-by-key comparison of two finished runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use imr_core::record::KvRecord;
use imr_core::run::{list_runs, RunReader};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::text::plain;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Comparison {
    /// Run id of the oracle side, from its manifest.
    pub oracle_run: String,
    pub compared: usize,
    pub exact: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Keys the oracle has and the candidate lacks.
    pub missing: Vec<String>,
    /// Keys the candidate has and the oracle lacks.
    pub extra: Vec<String>,
    /// Keys whose values are not numeric and differ.
    pub mismatched: Vec<String>,
}

impl Comparison {
    pub fn structural_mismatch(&self) -> bool {
        !self.missing.is_empty() || !self.extra.is_empty()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        !self.structural_mismatch() && self.mismatched.is_empty() && self.mean_rel_error <= tolerance
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "oracle run: {}", self.oracle_run)?;
        writeln!(f, "keys compared: {}, exact matches: {}", self.compared, self.exact)?;
        writeln!(f, "max relative error: {:e}", self.max_rel_error)?;
        writeln!(f, "mean relative error: {:e}", self.mean_rel_error)?;
        let list = |f: &mut fmt::Formatter<'_>, what: &str, keys: &[String]| {
            if keys.is_empty() {
                return Ok(());
            }
            let shown: Vec<&str> = keys.iter().take(20).map(String::as_str).collect();
            let more = if keys.len() > 20 { ", ..." } else { "" };
            writeln!(f, "{what} ({}): {}{more}", keys.len(), shown.join(", "))
        };
        list(f, "missing keys", &self.missing)?;
        list(f, "extra keys", &self.extra)?;
        list(f, "mismatched non-numeric values", &self.mismatched)?;
        if self.structural_mismatch() {
            writeln!(f, "structural mismatch: key spaces differ")?;
        }
        Ok(())
    }
}

/// The output directory of a run: `dir/output` when present, else `dir`.
pub fn output_dir(run: &Path) -> PathBuf {
    let nested = run.join("output");
    if nested.is_dir() {
        nested
    } else {
        run.to_path_buf()
    }
}

pub fn read_output(dir: &Path) -> anyhow::Result<BTreeMap<Vec<u8>, Vec<u8>>> {
    let runs = list_runs(dir)?;
    if runs.is_empty() {
        anyhow::bail!("no run files in {}", dir.display());
    }
    let mut out = BTreeMap::new();
    for path in runs {
        for rec in RunReader::<KvRecord>::open(&path)?.read_all()? {
            if out.insert(rec.key.clone(), rec.value).is_some() {
                anyhow::bail!("key {} appears twice in {}", plain(&rec.key), dir.display());
            }
        }
    }
    Ok(out)
}

/// Parses a value as a list of reals separated by `,` or `;`.
fn numbers(v: &[u8]) -> Option<Vec<f64>> {
    let text = std::str::from_utf8(v).ok()?;
    if text.is_empty() {
        return Some(Vec::new());
    }
    text.split([',', ';']).map(|t| t.trim().parse().ok()).collect()
}

/// Relative error of `a` against the reference `b`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else if b == 0.0 {
        (a - b).abs()
    } else {
        ((a - b) / b).abs()
    }
}

/// Compares candidate run `a` against oracle run `b`. Values are compared
/// numerically when both parse as reals, bytewise otherwise.
pub fn compare_runs(a: &Path, b: &Path) -> anyhow::Result<Comparison> {
    let left = read_output(&output_dir(a))?;
    let right = read_output(&output_dir(b))?;
    let mut c = Comparison {
        oracle_run: RunManifest::load(b)
            .map(|m| m.run_id)
            .unwrap_or_else(|_| format!("{} (no manifest)", b.display())),
        ..Default::default()
    };
    let mut total = 0.0;
    for (k, vb) in &right {
        let Some(va) = left.get(k) else {
            c.missing.push(plain(k));
            continue;
        };
        c.compared += 1;
        if va == vb {
            c.exact += 1;
            continue;
        }
        match (numbers(va), numbers(vb)) {
            (Some(x), Some(y)) if x.len() == y.len() => {
                let err = x
                    .iter()
                    .zip(&y)
                    .map(|(p, q)| relative_error(*p, *q))
                    .fold(0.0, f64::max);
                if err == 0.0 {
                    c.exact += 1;
                }
                c.max_rel_error = c.max_rel_error.max(err);
                total += err;
            }
            _ => c.mismatched.push(plain(k)),
        }
    }
    c.extra = left.keys().filter(|k| !right.contains_key(*k)).map(|k| plain(k)).collect();
    if c.compared > 0 {
        c.mean_rel_error = total / c.compared as f64;
    }
    Ok(c)
}
