//! PageRank over adjacency records `(i, "j1;j2;...")`, with rank state
//! keyed by vertex id.

use imr_core::iterative::{IterativeApp, Pair, Projection};

use crate::codec::{fmt_f64, parse_adjacency, parse_f64};

pub const DEFAULT_DAMPING: f64 = 0.85;

/// `R_j = d * sum_i R_i / |N_i| + (1 - d)`, ranks initialized to 1.
///
/// Every vertex also sends an empty marker to itself so that vertices with
/// no in-links still get a reduce instance and settle at `1 - d`. Dangling
/// vertices emit no mass.
#[derive(Debug, Clone, Copy)]
pub struct PageRank {
    pub damping: f64,
}

impl Default for PageRank {
    fn default() -> Self {
        PageRank {
            damping: DEFAULT_DAMPING,
        }
    }
}

impl PageRank {
    pub fn new(damping: f64) -> anyhow::Result<Self> {
        if !(damping > 0.0 && damping < 1.0) {
            anyhow::bail!("damping factor {damping} outside (0, 1)");
        }
        Ok(PageRank { damping })
    }
}

impl IterativeApp for PageRank {
    fn name(&self) -> &str {
        "pagerank"
    }

    fn projection(&self) -> Projection {
        Projection::OneToOne
    }

    fn project(&self, sk: &[u8]) -> anyhow::Result<Vec<u8>> {
        Ok(sk.to_vec())
    }

    fn init(&self, _dk: &[u8]) -> Vec<u8> {
        fmt_f64(1.0)
    }

    fn check_structure(&self, _sk: &[u8], sv: &[u8]) -> anyhow::Result<()> {
        parse_adjacency(sv).map(|_| ())
    }

    fn map(&self, sk: &[u8], sv: &[u8], _dk: &[u8], dv: &[u8]) -> anyhow::Result<Vec<Pair>> {
        let neighbors = parse_adjacency(sv)?;
        let rank = parse_f64(dv)?;
        let mut out = Vec::with_capacity(neighbors.len() + 1);
        let mut self_loop = false;
        if !neighbors.is_empty() {
            let share = fmt_f64(rank / neighbors.len() as f64);
            for n in neighbors {
                self_loop |= n.id.as_bytes() == sk;
                out.push((n.id.into_bytes(), share.clone()));
            }
        }
        if !self_loop {
            out.push((sk.to_vec(), Vec::new()));
        }
        Ok(out)
    }

    fn reduce(&self, _k2: &[u8], values: &[&[u8]]) -> anyhow::Result<Vec<u8>> {
        let mut sum = 0.0;
        for v in values.iter().filter(|v| !v.is_empty()) {
            sum += parse_f64(v)?;
        }
        Ok(fmt_f64(self.damping * sum + (1.0 - self.damping)))
    }

    fn difference(&self, prev: &[u8], curr: &[u8]) -> anyhow::Result<f64> {
        Ok((parse_f64(curr)? - parse_f64(prev)?).abs())
    }
}
