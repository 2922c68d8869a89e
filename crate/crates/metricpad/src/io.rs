//! Sample files (JSONL and CSV), score files and confusion matrices.
//!
//! Both sample formats carry the same columns. Floats are written in their
//! shortest round-trip decimal form, so export → ingest → export reproduces
//! the first file byte for byte.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use metricpad_core::bench::Benchmark;
use metricpad_core::eval::{ConfusionMatrix, ScoreEntry, ScoreSet};
use metricpad_core::{Label, PaiType, Sample, Split};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Provenance tag of ingested benchmarks.
pub const INGESTED: &str = "ingest";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Ok(Format::Jsonl),
            Some("csv") => Ok(Format::Csv),
            _ => Err(Error::Usage(format!(
                "cannot infer the format of {}; use a .jsonl or .csv extension",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    id: String,
    split: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pai_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pai_subtype: Option<String>,
    domain_tag: String,
    features: Vec<f64>,
}

fn parse_label(label: &str, pai_type: Option<&str>, pai_subtype: Option<&str>) -> std::result::Result<Label, String> {
    match (label, pai_type, pai_subtype) {
        ("genuine", None, None) => Ok(Label::Genuine),
        ("genuine", _, _) => Err("genuine rows must not carry a pai_type or pai_subtype".into()),
        ("attack", Some(t), Some(sub)) => {
            let t: PaiType = t.parse().map_err(|e: metricpad_core::Error| e.to_string())?;
            Label::attack(t, sub).map_err(|e| e.to_string())
        }
        ("attack", _, _) => Err("attack rows need both pai_type and pai_subtype".into()),
        (other, _, _) => Err(format!("unknown label {other:?}, expected genuine or attack")),
    }
}

fn to_sample(row: JsonRow) -> std::result::Result<Sample, String> {
    let label = parse_label(&row.label, row.pai_type.as_deref(), row.pai_subtype.as_deref())?;
    let split: Split = row.split.parse().map_err(|e: metricpad_core::Error| e.to_string())?;
    if let Some(k) = row.features.iter().position(|x| !x.is_finite()) {
        return Err(format!("feature {k} is not finite"));
    }
    Ok(Sample {
        id: row.id,
        features: row.features,
        label,
        domain_tag: row.domain_tag,
        split,
    })
}

fn label_columns(label: &Label) -> (&'static str, Option<String>, Option<String>) {
    match label {
        Label::Genuine => ("genuine", None, None),
        Label::Attack { pai_type, pai_subtype } => ("attack", Some(pai_type.to_string()), Some(pai_subtype.clone())),
    }
}

/// Checks feature lengths and id uniqueness as rows arrive.
struct RowChecks<'a> {
    path: &'a Path,
    dim: Option<usize>,
    seen: HashMap<String, u64>,
}

impl<'a> RowChecks<'a> {
    fn new(path: &'a Path) -> Self {
        RowChecks {
            path,
            dim: None,
            seen: HashMap::new(),
        }
    }

    fn parse_err(&self, line: u64, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn check(&mut self, s: &Sample, line: u64) -> Result<()> {
        let dim = *self.dim.get_or_insert(s.features.len());
        if s.features.len() != dim {
            return Err(self.parse_err(
                line,
                format!("{} features, expected {dim} like the first row", s.features.len()),
            ));
        }
        if let Some(first) = self.seen.insert(s.id.clone(), line) {
            return Err(self.parse_err(line, format!("duplicate id {:?}, first seen on line {first}", s.id)));
        }
        Ok(())
    }
}

pub fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Vec<Sample>> {
    let mut checks = RowChecks::new(path);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(&line).map_err(|e| checks.parse_err(n, e.to_string()))?;
        let s = to_sample(row).map_err(|m| checks.parse_err(n, m))?;
        checks.check(&s, n)?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl(mut w: impl Write, samples: &[Sample]) -> std::io::Result<()> {
    for s in samples {
        let (label, pai_type, pai_subtype) = label_columns(&s.label);
        let row = JsonRow {
            id: s.id.clone(),
            split: s.split.to_string(),
            label: label.into(),
            pai_type,
            pai_subtype,
            domain_tag: s.domain_tag.clone(),
            features: s.features.clone(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

const CSV_FIXED: [&str; 6] = ["id", "split", "label", "pai_type", "pai_subtype", "domain_tag"];

pub fn read_csv(reader: impl std::io::Read, path: &Path) -> Result<Vec<Sample>> {
    let mut checks = RowChecks::new(path);
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| checks.parse_err(1, e.to_string()))?.clone();
    let dim = header.len().saturating_sub(CSV_FIXED.len());
    let expected: Vec<String> = CSV_FIXED
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|k| format!("features_{k}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(checks.parse_err(
            1,
            format!("header must be {}", expected.join(",")),
        ));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            checks.parse_err(line, e.to_string())
        })?;
        let n = record.position().map_or(0, |p| p.line());
        let opt = |k: usize| Some(&record[k]).filter(|v| !v.is_empty()).map(str::to_string);
        let features = (CSV_FIXED.len()..record.len())
            .map(|k| {
                record[k]
                    .parse::<f64>()
                    .map_err(|e| checks.parse_err(n, format!("column {}: {e}", expected[k])))
            })
            .collect::<Result<Vec<f64>>>()?;
        let row = JsonRow {
            id: record[0].to_string(),
            split: record[1].to_string(),
            label: record[2].to_string(),
            pai_type: opt(3),
            pai_subtype: opt(4),
            domain_tag: record[5].to_string(),
            features,
        };
        let s = to_sample(row).map_err(|m| checks.parse_err(n, m))?;
        checks.check(&s, n)?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_csv(w: impl Write, samples: &[Sample]) -> std::io::Result<()> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut wtr = csv::Writer::from_writer(w);
    let header: Vec<String> = CSV_FIXED
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|k| format!("features_{k}")))
        .collect();
    wtr.write_record(&header)?;
    for s in samples {
        let (label, pai_type, pai_subtype) = label_columns(&s.label);
        let mut rec = vec![
            s.id.clone(),
            s.split.to_string(),
            label.to_string(),
            pai_type.unwrap_or_default(),
            pai_subtype.unwrap_or_default(),
            s.domain_tag.clone(),
        ];
        rec.extend(s.features.iter().map(|x| x.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Reads a JSONL or CSV sample file, chosen by extension.
pub fn ingest(path: &Path) -> Result<Benchmark> {
    let samples = match Format::from_path(path)? {
        Format::Jsonl => read_jsonl(open(path)?, path)?,
        Format::Csv => read_csv(open(path)?, path)?,
    };
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    Ok(Benchmark::from_samples(samples, INGESTED)?)
}

pub fn export(bench: &Benchmark, path: &Path) -> Result<()> {
    let format = Format::from_path(path)?;
    let mut w = create(path)?;
    match format {
        Format::Jsonl => write_jsonl(&mut w, &bench.samples),
        Format::Csv => write_csv(&mut w, &bench.samples),
    }
    .and_then(|_| w.flush())
    .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    id: String,
    score: f64,
    raw_score: f64,
    label: String,
    pai_type: Option<String>,
    pai_subtype: Option<String>,
}

pub fn write_scores(path: &Path, scores: &ScoreSet) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    for e in &scores.entries {
        wtr.serialize(ScoreRow {
            id: e.id.clone(),
            score: e.score,
            raw_score: e.raw_score,
            label: if e.genuine { "genuine" } else { "attack" }.into(),
            pai_type: e.pai_type.map(|t| t.to_string()),
            pai_subtype: e.pai_subtype.clone(),
        })
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut entries = Vec::new();
    for row in rdr.deserialize::<ScoreRow>() {
        let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = entries.len() as u64 + 2;
        let genuine = match row.label.as_str() {
            "genuine" => true,
            "attack" => false,
            other => return Err(err(line, format!("unknown label {other:?}"))),
        };
        let pai_type = row
            .pai_type
            .map(|t| t.parse::<PaiType>())
            .transpose()
            .map_err(|e| err(line, e.to_string()))?;
        entries.push(ScoreEntry {
            id: row.id,
            score: row.score,
            raw_score: row.raw_score,
            genuine,
            pai_type,
            pai_subtype: row.pai_subtype,
        });
    }
    Ok(ScoreSet::new(entries))
}

/// One row per true class, one column per prototype, entries are row rates.
pub fn write_confusion(path: &Path, m: &ConfusionMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    let write = |wtr: &mut csv::Writer<_>, rec: Vec<String>| {
        wtr.write_record(&rec).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    };
    write(
        &mut wtr,
        std::iter::once("true_class".to_string())
            .chain(m.predicted_classes.iter().cloned())
            .collect(),
    )?;
    for (class, row) in m.true_classes.iter().zip(&m.rates) {
        write(
            &mut wtr,
            std::iter::once(class.clone()).chain(row.iter().map(|x| x.to_string())).collect(),
        )?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `dir/name`, for output files.
pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
