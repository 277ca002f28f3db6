use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Interaction, Sample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InteractionFormat {
    /// `user_id<TAB>item_id<TAB>timestamp`, UTF-8, no header.
    #[default]
    Tsv,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn load_interactions(path: &Path, format: InteractionFormat) -> Result<Vec<Interaction>> {
    match format {
        InteractionFormat::Tsv => parse_interactions(open(path)?, &path.display().to_string()),
    }
}

/// Parse TSV interaction records. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_interactions<R: Read>(reader: R, source: &str) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let err = |msg: String| Error::Parse { path: source.to_string(), line: idx + 1, msg };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty user or item id".into()));
        }
        let ts = fields[2]
            .trim()
            .parse::<u64>()
            .map_err(|_| err(format!("timestamp `{}` is not a non-negative integer", fields[2])))?;
        out.push(Interaction::new(fields[0], fields[1], ts));
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut w = create(path)?;
    for it in interactions {
        writeln!(w, "{}\t{}\t{}", it.user_id, it.item_id, it.timestamp).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse `item_id f1 ... fD` lines. All rows must share one dimension.
pub fn parse_embeddings<R: Read>(reader: R, source: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let err = |msg: String| Error::Parse { path: source.to_string(), line: idx + 1, msg };
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        let values = parts
            .map(|p| p.parse::<f64>().map_err(|_| err(format!("`{p}` is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(err("no embedding values".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite embedding value".into()));
        }
        if let Some((_, first)) = out.first() {
            if first.len() != values.len() {
                return Err(err(format!("expected {} values, found {}", first.len(), values.len())));
            }
        }
        out.push((id.to_string(), values));
    }
    Ok(out)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    parse_embeddings(open(path)?, &path.display().to_string())
}

pub fn write_embeddings(path: &Path, embeddings: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = create(path)?;
    for (id, v) in embeddings {
        let mut line = id.clone();
        for x in v {
            line.push(' ');
            line.push_str(&x.to_string());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One JSON object per line: `{"user": ..., "history": [...], "target": ...}`.
pub fn write_split_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = create(path)?;
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split_manifest(path: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_lines_in_file_order() {
        let text = "u1\ti1\t10\nu2\ti2\t5\nu1\ti3\t7\n";
        let got = parse_interactions(text.as_bytes(), "mem").unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[1], Interaction::new("u2", "i2", 5));
    }

    #[test]
    fn bad_timestamp_reports_line() {
        let text = "u1\ti1\t10\nu2\ti2\tyesterday\n";
        match parse_interactions(text.as_bytes(), "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_interactions("u\ti\t-3\n".as_bytes(), "mem").is_err());
    }

    #[test]
    fn duplicates_are_kept() {
        let text = "u\ti\t1\nu\ti\t1\n";
        let lines = text.lines().count();
        assert_eq!(parse_interactions(text.as_bytes(), "mem").unwrap().len(), lines);
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse_interactions("".as_bytes(), "mem").unwrap().is_empty());
    }

    #[test]
    fn embeddings_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        let emb = vec![("a".to_string(), vec![0.1, -2.0, 1e-17]), ("b".to_string(), vec![3.0, 0.0, 4.5])];
        write_embeddings(&p, &emb).unwrap();
        assert_eq!(load_embeddings(&p).unwrap(), emb);
        std::fs::write(&p, "a 1 2\nb 1\n").unwrap();
        assert!(load_embeddings(&p).is_err());
    }

    #[test]
    fn split_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("test.jsonl");
        let samples = vec![Sample { user: "u".into(), history: vec!["a".into(), "b".into()], target: "c".into() }];
        write_split_manifest(&p, &samples).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "{\"user\":\"u\",\"history\":[\"a\",\"b\"],\"target\":\"c\"}\n");
        assert_eq!(read_split_manifest(&p).unwrap(), samples);
    }
}
