//! Sum of incoming edge weights per vertex: a one-step graph job over
//! weighted adjacency records.

use imr_core::engine::MapReduceApp;
use imr_core::result::Outputs;

use crate::codec::{fmt_f64, parse_adjacency, parse_f64};

#[derive(Debug, Clone, Copy, Default)]
pub struct InEdgeSum;

impl MapReduceApp for InEdgeSum {
    fn name(&self) -> &str {
        "inedge"
    }

    fn map(&self, _key: &[u8], value: &[u8]) -> anyhow::Result<Vec<(Vec<u8>, Vec<u8>)>> {
        parse_adjacency(value)?
            .into_iter()
            .map(|n| {
                let w = n
                    .weight
                    .ok_or_else(|| anyhow::anyhow!("edge to {} has no weight", n.id))?;
                Ok((n.id.into_bytes(), fmt_f64(w)))
            })
            .collect()
    }

    fn reduce(&self, key: &[u8], values: &[&[u8]]) -> anyhow::Result<Outputs> {
        let mut sum = 0.0;
        for v in values {
            sum += parse_f64(v)?;
        }
        Ok(vec![(key.to_vec(), fmt_f64(sum))])
    }
}
