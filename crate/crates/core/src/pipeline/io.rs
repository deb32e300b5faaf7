//! CSV tables exchanged between pipeline stages.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Embedding, Provenance};
use crate::error::{Error, Result};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let (line, column) = e
        .position()
        .map(|p| (p.line() as usize, 0))
        .unwrap_or((0, 0));
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: e.to_string(),
    }
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, col: usize) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line() as usize);
    let raw = rec.get(col).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: col + 1,
        message: "missing field".into(),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: col + 1,
        message: format!("cannot parse `{raw}`"),
    })
}

fn expect_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    for (i, w) in want.iter().enumerate() {
        if got.get(i) != Some(*w) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "column {} must be `{w}`, found `{}`",
                    i + 1,
                    got.get(i).unwrap_or("")
                ),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Embeddings

const EMBEDDING_KEYS: [&str; 4] = [
    "subject_id",
    "window_start",
    "seconds_from_bleed",
    "overlaps_draw",
];

/// `subject_id,window_start,seconds_from_bleed,overlaps_draw,e0,e1,...`
pub fn embeddings_csv(embeddings: &[Embedding]) -> Result<String> {
    let dim = embeddings.first().map_or(0, |e| e.values.len());
    let mut out = EMBEDDING_KEYS.join(",");
    for i in 0..dim {
        write!(out, ",e{i}").unwrap();
    }
    out.push('\n');
    for e in embeddings {
        let p = e
            .provenance
            .as_ref()
            .ok_or_else(|| Error::Precondition("embedding without provenance".into()))?;
        if e.values.len() != dim {
            return Err(Error::Shape("embeddings have different dimensions".into()));
        }
        write!(
            out,
            "{},{},{},{}",
            p.subject_id,
            p.window_start,
            p.seconds_from_bleed,
            u8::from(p.overlaps_draw)
        )
        .unwrap();
        for v in &e.values {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_embeddings(embeddings: &[Embedding], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &embeddings_csv(embeddings)?)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<Embedding>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    expect_header(path, &header, &EMBEDDING_KEYS)?;
    let dim = header.len() - EMBEDDING_KEYS.len();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let values = (0..dim)
            .map(|i| field::<f64>(path, &rec, 4 + i))
            .collect::<Result<Vec<_>>>()?;
        out.push(Embedding {
            values,
            provenance: Some(Provenance {
                subject_id: rec[0].to_string(),
                window_start: field(path, &rec, 1)?,
                seconds_from_bleed: field(path, &rec, 2)?,
                overlaps_draw: field::<u8>(path, &rec, 3)? != 0,
            }),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cluster labels

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub subject_id: String,
    pub window_start: usize,
    pub seconds_from_bleed: f64,
    pub label: usize,
}

const LABEL_KEYS: [&str; 4] = ["subject_id", "window_start", "seconds_from_bleed", "label"];

pub fn label_rows(embeddings: &[Embedding], labels: &[usize]) -> Result<Vec<LabelRow>> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    embeddings
        .iter()
        .zip(labels)
        .map(|(e, &label)| {
            let p = e
                .provenance
                .as_ref()
                .ok_or_else(|| Error::Precondition("embedding without provenance".into()))?;
            Ok(LabelRow {
                subject_id: p.subject_id.clone(),
                window_start: p.window_start,
                seconds_from_bleed: p.seconds_from_bleed,
                label,
            })
        })
        .collect()
}

pub fn labels_csv(rows: &[LabelRow]) -> String {
    let mut out = LABEL_KEYS.join(",");
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.subject_id, r.window_start, r.seconds_from_bleed, r.label
        )
        .unwrap();
    }
    out
}

pub fn write_labels(rows: &[LabelRow], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &labels_csv(rows))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    expect_header(path, &header, &LABEL_KEYS)?;
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            Ok(LabelRow {
                subject_id: rec[0].to_string(),
                window_start: field(path, &rec, 1)?,
                seconds_from_bleed: field(path, &rec, 2)?,
                label: field(path, &rec, 3)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Feature table

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub subject_ids: Vec<String>,
    pub window_starts: Vec<usize>,
    pub seconds_from_bleed: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Cluster label of every row, looked up by subject and window start.
    pub fn align_labels(&self, labels: &[LabelRow]) -> Result<Vec<usize>> {
        let map: std::collections::HashMap<(&str, usize), usize> = labels
            .iter()
            .map(|r| ((r.subject_id.as_str(), r.window_start), r.label))
            .collect();
        self.subject_ids
            .iter()
            .zip(&self.window_starts)
            .map(|(s, &w)| {
                map.get(&(s.as_str(), w))
                    .copied()
                    .ok_or_else(|| Error::Precondition(format!("no label for {s} window at {w}")))
            })
            .collect()
    }
}

const FEATURE_KEYS: [&str; 3] = ["subject_id", "window_start", "seconds_from_bleed"];

pub fn features_csv(table: &FeatureTable) -> String {
    let mut out = FEATURE_KEYS.join(",");
    for n in &table.names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for i in 0..table.rows.len() {
        write!(
            out,
            "{},{},{}",
            table.subject_ids[i], table.window_starts[i], table.seconds_from_bleed[i]
        )
        .unwrap();
        for v in &table.rows[i] {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_features(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &features_csv(table))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    expect_header(path, &header, &FEATURE_KEYS)?;
    let names: Vec<String> = header.iter().skip(3).map(str::to_string).collect();
    let mut t = FeatureTable {
        names,
        subject_ids: Vec::new(),
        window_starts: Vec::new(),
        seconds_from_bleed: Vec::new(),
        rows: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        t.subject_ids.push(rec[0].to_string());
        t.window_starts.push(field(path, &rec, 1)?);
        t.seconds_from_bleed.push(field(path, &rec, 2)?);
        t.rows.push(
            (0..t.names.len())
                .map(|i| field::<f64>(path, &rec, 3 + i))
                .collect::<Result<_>>()?,
        );
    }
    Ok(t)
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    write_text(path, text)
}
