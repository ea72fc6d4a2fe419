//! JSONL persistence. Line 1 is an optional header; every further line is one
//! annotated record.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedSample, Dataset, GeneratorKnobs, OracleThresholds, Sample, Split};
use crate::error::{Error, Result};
use crate::taxonomy::{AttributeSet, Family, Polarity};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: u32,
    pub tree_hash: String,
    pub thresholds: OracleThresholds,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Record {
    points: Vec<f64>,
    family: Family,
    a_pos: Vec<String>,
    a_neg: Vec<String>,
    knobs: GeneratorKnobs,
    split: Split,
}

impl From<&AnnotatedSample> for Record {
    fn from(s: &AnnotatedSample) -> Self {
        Record {
            points: s.sample.points.clone(),
            family: s.sample.family,
            a_pos: s.a_pos.pair_ids().map(str::to_string).collect(),
            a_neg: s.a_neg.pair_ids().map(str::to_string).collect(),
            knobs: s.knobs,
            split: s.split,
        }
    }
}

impl Record {
    fn into_sample(self) -> std::result::Result<AnnotatedSample, String> {
        if !self.points.len().is_multiple_of(2) {
            return Err(format!("odd coordinate count {}", self.points.len()));
        }
        if !self.points.iter().all(|x| x.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        let a_pos = AttributeSet::with_polarity(Polarity::Pos, self.a_pos);
        let a_neg = AttributeSet::with_polarity(Polarity::Neg, self.a_neg);
        if let Some(p) = a_pos.pair_ids().find(|p| a_neg.contains_pair(p)) {
            return Err(format!("pair `{p}` listed as both positive and negative"));
        }
        Ok(AnnotatedSample {
            sample: Sample {
                points: self.points,
                family: self.family,
            },
            a_pos,
            a_neg,
            knobs: self.knobs,
            split: self.split,
        })
    }
}

pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
    if let Some(h) = &data.header {
        line(serde_json::to_string(h)?)?;
    }
    for s in &data.samples {
        line(serde_json::to_string(&Record::from(s))?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut header = None;
    let mut samples = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(&text);
    if body.is_empty() {
        return Ok(Dataset { header, samples });
    }
    for (i, raw) in body.split('\n').enumerate() {
        let line_no = i + 1;
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| parse_err(line_no, e.to_string()))?;
        if i == 0 && value.get("schema").is_some() {
            let h: DatasetHeader =
                serde_json::from_value(value).map_err(|e| parse_err(line_no, e.to_string()))?;
            if h.schema != SCHEMA_VERSION {
                return Err(parse_err(
                    line_no,
                    format!("unsupported schema {}", h.schema),
                ));
            }
            header = Some(h);
            continue;
        }
        let rec: Record =
            serde_json::from_value(value).map_err(|e| parse_err(line_no, e.to_string()))?;
        samples.push(rec.into_sample().map_err(|m| parse_err(line_no, m))?);
    }
    Ok(Dataset { header, samples })
}
