//! Text encodings shared by the apps. Numbers use Rust's shortest
//! round-trip formatting so values survive a write/parse cycle exactly.

use anyhow::{anyhow, bail, Context};

pub fn parse_f64(bytes: &[u8]) -> anyhow::Result<f64> {
    let text = std::str::from_utf8(bytes).context("value is not utf-8")?;
    text.trim()
        .parse()
        .with_context(|| format!("'{text}' is not a number"))
}

pub fn fmt_f64(x: f64) -> Vec<u8> {
    format!("{x}").into_bytes()
}

pub fn parse_u64(bytes: &[u8]) -> anyhow::Result<u64> {
    let text = std::str::from_utf8(bytes).context("value is not utf-8")?;
    text.parse()
        .with_context(|| format!("'{text}' is not an integer"))
}

pub fn fmt_u64(x: u64) -> Vec<u8> {
    x.to_string().into_bytes()
}

/// Comma-separated reals; the empty string is the empty vector.
pub fn parse_vec(bytes: &[u8]) -> anyhow::Result<Vec<f64>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    bytes.split(|&b| b == b',').map(parse_f64).collect()
}

pub fn fmt_vec(xs: &[f64]) -> Vec<u8> {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
        .into_bytes()
}

pub fn utf8(bytes: &[u8]) -> anyhow::Result<&str> {
    std::str::from_utf8(bytes).map_err(|_| anyhow!("key is not utf-8"))
}

/// One out-neighbor of an adjacency record.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub weight: Option<f64>,
}

/// Parses `"j1:w1;j2:w2"` or `"j1;j2"`. Neighbor ids must be unique.
pub fn parse_adjacency(bytes: &[u8]) -> anyhow::Result<Vec<Neighbor>> {
    let text = utf8(bytes)?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let mut out: Vec<Neighbor> = Vec::new();
    for item in text.split(';') {
        let (id, weight) = match item.split_once(':') {
            Some((id, w)) => (
                id,
                Some(w.parse::<f64>().with_context(|| format!("bad weight in '{item}'"))?),
            ),
            None => (item, None),
        };
        if id.is_empty() {
            bail!("empty neighbor id in '{text}'");
        }
        out.push(Neighbor {
            id: id.to_string(),
            weight,
        });
    }
    let mut ids: Vec<&str> = out.iter().map(|n| n.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        bail!("neighbor {} listed twice", w[0]);
    }
    Ok(out)
}

pub fn fmt_adjacency(neighbors: &[Neighbor]) -> Vec<u8> {
    neighbors
        .iter()
        .map(|n| match n.weight {
            Some(w) => format!("{}:{w}", n.id),
            None => n.id.clone(),
        })
        .collect::<Vec<_>>()
        .join(";")
        .into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_round_trip() {
        let adj = parse_adjacency(b"1:0.3;2:0.3").unwrap();
        assert_eq!(adj.len(), 2);
        assert_eq!(adj[1].weight, Some(0.3));
        assert_eq!(fmt_adjacency(&adj), b"1:0.3;2:0.3");
        assert_eq!(parse_adjacency(b"").unwrap(), vec![]);
        assert_eq!(parse_adjacency(b"4;5").unwrap()[0].weight, None);
        assert!(parse_adjacency(b"1;1").is_err());
        assert!(parse_adjacency(b"1:x").is_err());
    }

    #[test]
    fn floats_round_trip_exactly() {
        for x in [0.1 + 0.2, 1.0 / 3.0, 1e-300, f64::INFINITY, -2.5] {
            assert_eq!(parse_f64(&fmt_f64(x)).unwrap(), x);
        }
        let v = vec![0.15, 2.0, -1e10];
        assert_eq!(parse_vec(&fmt_vec(&v)).unwrap(), v);
        assert!(parse_vec(b"").unwrap().is_empty());
    }
}
