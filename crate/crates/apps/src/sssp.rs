//! Single-source shortest paths over weighted adjacency records
//! `(i, "j1:w1;j2:w2")`. Distances are reals; unreachable is `inf`.

use imr_core::iterative::{IterativeApp, Pair, Projection};

use crate::codec::{fmt_f64, parse_adjacency, parse_f64};

/// Bellman-Ford style relaxation: `d_j = min_i (d_i + w_ij)` and
/// `d_source = 0`.
///
/// The reduce takes the minimum over incoming candidates only, not over
/// the previous `d_j`, so that raising an edge weight can lengthen paths.
/// Every vertex sends an empty marker to itself to keep its reduce
/// instance alive when it has no in-links.
#[derive(Debug, Clone)]
pub struct Sssp {
    pub source: Vec<u8>,
}

impl Sssp {
    pub fn new(source: impl Into<Vec<u8>>) -> Self {
        Sssp { source: source.into() }
    }
}

impl IterativeApp for Sssp {
    fn name(&self) -> &str {
        "sssp"
    }

    fn projection(&self) -> Projection {
        Projection::OneToOne
    }

    fn project(&self, sk: &[u8]) -> anyhow::Result<Vec<u8>> {
        Ok(sk.to_vec())
    }

    fn init(&self, dk: &[u8]) -> Vec<u8> {
        fmt_f64(if dk == self.source.as_slice() { 0.0 } else { f64::INFINITY })
    }

    fn check_structure(&self, _sk: &[u8], sv: &[u8]) -> anyhow::Result<()> {
        for n in parse_adjacency(sv)? {
            match n.weight {
                None => anyhow::bail!("edge to {} has no weight", n.id),
                Some(w) if !(w >= 0.0 && w.is_finite()) => {
                    anyhow::bail!("edge to {} has weight {w}; weights must be finite and non-negative", n.id)
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn map(&self, sk: &[u8], sv: &[u8], _dk: &[u8], dv: &[u8]) -> anyhow::Result<Vec<Pair>> {
        let d = parse_f64(dv)?;
        let mut out = Vec::new();
        let mut self_loop = false;
        for n in parse_adjacency(sv)? {
            let w = n.weight.ok_or_else(|| anyhow::anyhow!("edge to {} has no weight", n.id))?;
            self_loop |= n.id.as_bytes() == sk;
            out.push((n.id.into_bytes(), fmt_f64(d + w)));
        }
        if !self_loop {
            out.push((sk.to_vec(), Vec::new()));
        }
        Ok(out)
    }

    fn reduce(&self, k2: &[u8], values: &[&[u8]]) -> anyhow::Result<Vec<u8>> {
        if k2 == self.source.as_slice() {
            return Ok(fmt_f64(0.0));
        }
        let mut best = f64::INFINITY;
        for v in values.iter().filter(|v| !v.is_empty()) {
            best = best.min(parse_f64(v)?);
        }
        Ok(fmt_f64(best))
    }

    fn difference(&self, prev: &[u8], curr: &[u8]) -> anyhow::Result<f64> {
        let (a, b) = (parse_f64(prev)?, parse_f64(curr)?);
        Ok(if a == b { 0.0 } else { (a - b).abs() })
    }
}
