//! Conversion between plain text and run files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use anyhow::{bail, Context};
use clap::ValueEnum;
use imr_apps::codec::{fmt_adjacency, fmt_vec, Neighbor};
use imr_core::record::{DeltaRecord, KvRecord, MrbgEdge, RecordKind, StructureEntry};
use imr_core::run::{list_runs, write_sorted_run, RunReader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TextFormat {
    /// `key<TAB>value` per line.
    Kv,
    /// Edge list, `src dst [weight]` per line. Vertices seen only as a
    /// destination get an empty adjacency list.
    Edges,
    /// One document per line.
    Docs,
    /// One point per line, coordinates separated by spaces or commas.
    Points,
}

/// Bytes as text when they are UTF-8, else `0x`-prefixed hex.
pub fn plain(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => format!("0x{}", hex::encode(bytes)),
    }
}

fn content_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(line);
    }
    Ok(out)
}

pub fn parse_text(path: &Path, format: TextFormat) -> anyhow::Result<Vec<KvRecord>> {
    let lines = content_lines(path)?;
    let mut records = Vec::with_capacity(lines.len());
    match format {
        TextFormat::Kv => {
            for (n, line) in lines.iter().enumerate() {
                let Some((k, v)) = line.split_once('\t') else {
                    bail!("line {}: expected key<TAB>value", n + 1);
                };
                if k.is_empty() {
                    bail!("line {}: empty key", n + 1);
                }
                records.push(KvRecord::new(k, v));
            }
        }
        TextFormat::Edges => {
            let mut adj: BTreeMap<String, BTreeMap<String, Option<f64>>> = BTreeMap::new();
            for (n, line) in lines.iter().enumerate() {
                let fields: Vec<&str> = line.split_whitespace().collect();
                let weight = match fields.as_slice() {
                    [_, _] => None,
                    [_, _, w] => Some(w.parse::<f64>().with_context(|| format!("line {}: bad weight", n + 1))?),
                    _ => bail!("line {}: expected `src dst [weight]`", n + 1),
                };
                adj.entry(fields[0].to_string())
                    .or_default()
                    .insert(fields[1].to_string(), weight);
                adj.entry(fields[1].to_string()).or_default();
            }
            for (src, dsts) in adj {
                let neighbors: Vec<Neighbor> = dsts.into_iter().map(|(id, weight)| Neighbor { id, weight }).collect();
                records.push(KvRecord::new(src, fmt_adjacency(&neighbors)));
            }
        }
        TextFormat::Docs => {
            for (n, line) in lines.iter().enumerate() {
                records.push(KvRecord::new(format!("d{n:07}"), line.trim()));
            }
        }
        TextFormat::Points => {
            for (n, line) in lines.iter().enumerate() {
                let coords = line
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .with_context(|| format!("line {}: bad coordinate", n + 1))?;
                if coords.is_empty() {
                    bail!("line {}: no coordinates", n + 1);
                }
                records.push(KvRecord::new(format!("p{n:07}"), fmt_vec(&coords)));
            }
        }
    }
    Ok(records)
}

/// Converts a text file into a single sorted run `out/part-00000.run`.
pub fn import(path: &Path, format: TextFormat, out: &Path) -> anyhow::Result<usize> {
    let mut records = parse_text(path, format)?;
    records.sort();
    if let Some(w) = records.windows(2).find(|w| w[0].key == w[1].key) {
        bail!("duplicate key {}", plain(&w[0].key));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_sorted_run(out.join("part-00000.run"), 0, &records)?;
    Ok(records.len())
}

fn run_kind(path: &Path) -> anyhow::Result<RecordKind> {
    let mut head = [0u8; 7];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .with_context(|| format!("reading header of {}", path.display()))?;
    RecordKind::from_byte(head[6]).with_context(|| format!("{} is not a run file", path.display()))
}

fn dump_records<R: imr_core::record::Record>(path: &Path, out: &mut String, line: impl Fn(&R) -> String) -> anyhow::Result<()> {
    for rec in RunReader::<R>::open(path)?.iter()? {
        out.push_str(&line(&rec?));
        out.push('\n');
    }
    Ok(())
}

/// Renders a run file, or every run in a directory, as text.
pub fn dump(path: &Path) -> anyhow::Result<String> {
    let files = if path.is_dir() { list_runs(path)? } else { vec![path.to_path_buf()] };
    let mut out = String::new();
    for file in files {
        if path.is_dir() {
            writeln!(out, "# {}", file.display())?;
        }
        match run_kind(&file)? {
            RecordKind::Kv => dump_records::<KvRecord>(&file, &mut out, |r| format!("{}\t{}", plain(&r.key), plain(&r.value)))?,
            RecordKind::Delta => dump_records::<DeltaRecord>(&file, &mut out, |r| {
                format!(
                    "{}\t{}\t{}\t{}",
                    r.sign.byte() as char,
                    plain(&r.record.key),
                    plain(&r.record.value),
                    r.map_key
                )
            })?,
            RecordKind::Edge => dump_records::<MrbgEdge>(&file, &mut out, |r| format!("{r:?}"))?,
            RecordKind::Structure => dump_records::<StructureEntry>(&file, &mut out, |r| format!("{r:?}"))?,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_list_groups_by_source() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("g.txt");
        std::fs::write(&src, "# comment\n1 2\n1 3\n3 1\n").unwrap();
        let recs = parse_text(&src, TextFormat::Edges).unwrap();
        let shown: Vec<(String, String)> = recs.iter().map(|r| (plain(&r.key), plain(&r.value))).collect();
        assert_eq!(
            shown,
            vec![
                ("1".into(), "2;3".into()),
                ("2".into(), "".into()),
                ("3".into(), "1".into())
            ]
        );
    }

    #[test]
    fn import_then_dump() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("p.txt");
        std::fs::write(&src, "1 2\n3,4\n").unwrap();
        assert_eq!(import(&src, TextFormat::Points, &tmp.path().join("out")).unwrap(), 2);
        let text = dump(&tmp.path().join("out/part-00000.run")).unwrap();
        assert_eq!(text, "p0000000\t1,2\np0000001\t3,4\n");
    }

    #[test]
    fn kv_rejects_duplicates() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("kv.txt");
        std::fs::write(&src, "a\t1\na\t2\n").unwrap();
        assert!(import(&src, TextFormat::Kv, &tmp.path().join("out")).is_err());
    }
}
