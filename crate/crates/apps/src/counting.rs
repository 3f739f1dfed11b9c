//! Word and word-pair counting over whitespace-tokenized documents.

use std::collections::{BTreeMap, BTreeSet};

use imr_core::engine::{Accumulator, MapReduceApp};
use imr_core::result::Outputs;

use crate::codec::{fmt_u64, parse_u64, utf8};

/// Integer sum over decimal-text counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct CountSum;

impl Accumulator for CountSum {
    fn identity(&self) -> Vec<u8> {
        b"0".to_vec()
    }

    fn accumulate(&self, acc: &[u8], value: &[u8]) -> anyhow::Result<Vec<u8>> {
        let sum = parse_u64(acc)?
            .checked_add(parse_u64(value)?)
            .ok_or_else(|| anyhow::anyhow!("count overflow"))?;
        Ok(fmt_u64(sum))
    }
}

fn sum_counts(values: &[&[u8]]) -> anyhow::Result<u64> {
    values.iter().try_fold(0u64, |acc, v| {
        acc.checked_add(parse_u64(v)?)
            .ok_or_else(|| anyhow::anyhow!("count overflow"))
    })
}

/// Records are `(doc id, text)`; output is `(word, count)`. Each document
/// is aggregated locally so one map invocation emits every word once.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordCount;

impl MapReduceApp for WordCount {
    fn name(&self) -> &str {
        "wordcount"
    }

    fn map(&self, _key: &[u8], value: &[u8]) -> anyhow::Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for word in utf8(value)?.split_whitespace() {
            *counts.entry(word).or_default() += 1;
        }
        Ok(counts
            .into_iter()
            .map(|(w, c)| (w.as_bytes().to_vec(), fmt_u64(c)))
            .collect())
    }

    fn reduce(&self, key: &[u8], values: &[&[u8]]) -> anyhow::Result<Outputs> {
        Ok(vec![(key.to_vec(), fmt_u64(sum_counts(values)?))])
    }

    fn accumulator(&self) -> Option<&dyn Accumulator> {
        Some(&CountSum)
    }
}

/// Counts, per candidate pair, the documents containing both words.
/// Output keys are `"a,b"`.
#[derive(Debug, Clone, Default)]
pub struct PairCount {
    candidates: BTreeSet<(String, String)>,
}

impl PairCount {
    /// Pairs are normalized so that `a < b`.
    pub fn new<I, S>(candidates: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let candidates = candidates
            .into_iter()
            .map(|(a, b)| {
                let (a, b) = (a.into(), b.into());
                if a <= b {
                    (a, b)
                } else {
                    (b, a)
                }
            })
            .collect();
        PairCount { candidates }
    }

    /// Candidate pairs from a file with one `a,b` pair per line.
    pub fn from_lines(text: &str) -> anyhow::Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| anyhow::anyhow!("candidate line '{line}' is not 'a,b'"))?;
            pairs.push((a.trim().to_string(), b.trim().to_string()));
        }
        Ok(Self::new(pairs))
    }

    pub fn candidates(&self) -> impl Iterator<Item = &(String, String)> {
        self.candidates.iter()
    }
}

impl MapReduceApp for PairCount {
    fn name(&self) -> &str {
        "paircount"
    }

    fn map(&self, _key: &[u8], value: &[u8]) -> anyhow::Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let words: BTreeSet<&str> = utf8(value)?.split_whitespace().collect();
        Ok(self
            .candidates
            .iter()
            .filter(|(a, b)| words.contains(a.as_str()) && words.contains(b.as_str()))
            .map(|(a, b)| (format!("{a},{b}").into_bytes(), b"1".to_vec()))
            .collect())
    }

    fn reduce(&self, key: &[u8], values: &[&[u8]]) -> anyhow::Result<Outputs> {
        Ok(vec![(key.to_vec(), fmt_u64(sum_counts(values)?))])
    }

    fn accumulator(&self) -> Option<&dyn Accumulator> {
        Some(&CountSum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wordcount_aggregates_per_document() {
        let out = WordCount.map(b"d1", b"a b a").unwrap();
        assert_eq!(out, vec![(b"a".to_vec(), b"2".to_vec()), (b"b".to_vec(), b"1".to_vec())]);
    }

    #[test]
    fn pair_count_by_hand() {
        let app = PairCount::new([("a", "b"), ("c", "b")]);
        let mut totals: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
        for doc in ["a b", "a b c"] {
            for (k, v) in app.map(b"", doc.as_bytes()).unwrap() {
                *totals.entry(k).or_default() += parse_u64(&v).unwrap();
            }
        }
        let expect: BTreeMap<Vec<u8>, u64> = [(b"a,b".to_vec(), 2), (b"b,c".to_vec(), 1)].into();
        assert_eq!(totals, expect);
    }

    #[test]
    fn count_sum_is_a_monoid() {
        let acc = CountSum;
        assert_eq!(acc.accumulate(&acc.identity(), b"7").unwrap(), b"7");
        assert_eq!(acc.accumulate(b"5", b"2").unwrap(), b"7");
        assert!(acc.accumulate(b"18446744073709551615", b"1").is_err());
    }
}
