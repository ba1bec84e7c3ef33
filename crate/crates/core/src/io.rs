//! File formats: dataset JSON/CSV, generator specs, model checkpoints,
//! segmentation reports, feature tables, and training diagnostics.
//!
//! Every JSON output carries `"version"`; loaders treat a missing field as
//! version 1 and reject anything else. I/O failures keep the offending path
//! in the error, parse failures keep the path and the field serde names.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorSpec, GroundTruth};
use crate::model::{Dataset, Hyperparams, KernelParams, ModelState, Sequence};
use crate::trainer::{RoundDiagnostics, SegmentOutput};

pub const SCHEMA_VERSION: u32 = 1;

fn default_version() -> u32 {
    SCHEMA_VERSION
}

fn check_version(version: u32, path: &Path) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::schema(format!(
            "{}: version {version} is not supported (expected {SCHEMA_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

// ---------------------------------------------------------------- datasets

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    #[serde(default = "default_version")]
    version: u32,
    sequences: Vec<Sequence>,
}

pub fn save_dataset_json(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let file = DatasetFile { version: SCHEMA_VERSION, sequences: data.sequences.clone() };
    write_file(path.as_ref(), &to_pretty_json(&file)?)
}

pub fn load_dataset_json(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file: DatasetFile = parse_json(path, &read_file(path)?)?;
    check_version(file.version, path)?;
    Ok(Dataset { sequences: file.sequences })
}

pub fn save_dataset_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("seq_id,x,y\n");
    for seq in &data.sequences {
        for (x, y) in seq.x.iter().zip(&seq.y) {
            out.push_str(&format!("{},{x},{y}\n", seq.id));
        }
    }
    write_file(path, &out)
}

pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
        let expected = ["seq_id", "x", "y"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::schema(format!(
                "{}: expected header seq_id,x,y, got {}",
                path.display(),
                got.join(",")
            )));
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
        if record.len() != 3 {
            return Err(Error::schema(format!(
                "{}: row {} has {} fields, expected 3",
                path.display(),
                line + 2,
                record.len()
            )));
        }
        let id = record[0].to_string();
        let parse = |field: &str, name: &str| {
            field.parse::<f64>().map_err(|_| {
                Error::schema(format!(
                    "{}: row {}: {name} '{}' is not a number",
                    path.display(),
                    line + 2,
                    field
                ))
            })
        };
        let x = parse(&record[1], "x")?;
        let y = parse(&record[2], "y")?;
        let idx = match order.iter().position(|o| *o == id) {
            Some(i) => i,
            None => {
                order.push(id);
                xs.push(Vec::new());
                ys.push(Vec::new());
                order.len() - 1
            }
        };
        xs[idx].push(x);
        ys[idx].push(y);
    }
    let sequences = order
        .into_iter()
        .zip(xs)
        .zip(ys)
        .map(|((id, x), y)| Sequence { id, x, y })
        .collect();
    Ok(Dataset { sequences })
}

/// Dispatches on extension: `.csv` loads the tabular form, anything else is
/// treated as dataset JSON.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_dataset_csv(path)
    } else {
        load_dataset_json(path)
    }
}

// ------------------------------------------------- generator specs & truth

pub fn load_generator_spec(path: impl AsRef<Path>) -> Result<GeneratorSpec> {
    let path = path.as_ref();
    parse_json(path, &read_file(path)?)
}

pub fn save_generator_spec(path: impl AsRef<Path>, spec: &GeneratorSpec) -> Result<()> {
    write_file(path.as_ref(), &to_pretty_json(spec)?)
}

#[derive(Serialize, Deserialize)]
struct GroundTruthFile {
    #[serde(default = "default_version")]
    version: u32,
    sequences: Vec<GroundTruth>,
}

pub fn save_ground_truth(path: impl AsRef<Path>, truths: &[GroundTruth]) -> Result<()> {
    let file = GroundTruthFile { version: SCHEMA_VERSION, sequences: truths.to_vec() };
    write_file(path.as_ref(), &to_pretty_json(&file)?)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    let path = path.as_ref();
    let file: GroundTruthFile = parse_json(path, &read_file(path)?)?;
    check_version(file.version, path)?;
    Ok(file.sequences)
}

// -------------------------------------------------------------- checkpoints

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    kernels: Vec<KernelParams>,
    beta: f64,
    alpha: Vec<f64>,
    hyperparams: Hyperparams,
    #[serde(default = "default_version")]
    version: u32,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    state: &ModelState,
    hp: &Hyperparams,
) -> Result<()> {
    let file = CheckpointFile {
        kernels: state.kernels.clone(),
        beta: state.beta,
        alpha: state.alpha.clone(),
        hyperparams: hp.clone(),
        version: SCHEMA_VERSION,
    };
    write_file(path.as_ref(), &to_pretty_json(&file)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelState, Hyperparams)> {
    let path = path.as_ref();
    let file: CheckpointFile = parse_json(path, &read_file(path)?)?;
    check_version(file.version, path)?;
    let state = ModelState::new(file.kernels, file.beta, file.alpha)?;
    Ok((state, file.hyperparams))
}

// ----------------------------------------------------- segmentation reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub seq_id: String,
    /// Number of timesteps in the sequence.
    pub n: usize,
    /// Posterior split probability for indices 1..N−1; index 0 is
    /// structurally 1 and omitted.
    pub marginal_split_prob: Vec<f64>,
    /// Per retained sample, the segment start indices.
    pub samples: Vec<Vec<usize>>,
    /// `labels[sample][segment]`: argmax-responsibility kernel.
    pub labels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Kernel pool size the labels refer to.
    pub m: usize,
    pub sequences: Vec<SequenceReport>,
}

impl SegmentationReport {
    pub fn from_outputs(outputs: &[SegmentOutput], m: usize) -> Self {
        let sequences = outputs
            .iter()
            .map(|out| SequenceReport {
                seq_id: out.seq_id.clone(),
                n: out.marginal_split_prob.len(),
                marginal_split_prob: out.marginal_split_prob[1..].to_vec(),
                samples: out.samples.iter().map(|s| s.start_indices()).collect(),
                labels: out.labels.clone(),
            })
            .collect();
        SegmentationReport { version: SCHEMA_VERSION, m, sequences }
    }
}

pub fn save_segmentation_report(path: impl AsRef<Path>, report: &SegmentationReport) -> Result<()> {
    write_file(path.as_ref(), &to_pretty_json(report)?)
}

pub fn load_segmentation_report(path: impl AsRef<Path>) -> Result<SegmentationReport> {
    let path = path.as_ref();
    let report: SegmentationReport = parse_json(path, &read_file(path)?)?;
    check_version(report.version, path)?;
    for seq in &report.sequences {
        if seq.marginal_split_prob.len() + 1 != seq.n {
            return Err(Error::schema(format!(
                "{}: sequence '{}' has {} marginals for n = {}",
                path.display(),
                seq.seq_id,
                seq.marginal_split_prob.len(),
                seq.n
            )));
        }
        if seq.samples.len() != seq.labels.len() {
            return Err(Error::schema(format!(
                "{}: sequence '{}' has {} samples but {} label rows",
                path.display(),
                seq.seq_id,
                seq.samples.len(),
                seq.labels.len()
            )));
        }
    }
    Ok(report)
}

// ------------------------------------------------------------ feature table

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub seq_id: String,
    pub string: String,
    pub frequencies: Vec<f64>,
}

/// CSV with header `seq_id,string,f_0..f_{M−1}`.
pub fn save_features_csv(path: impl AsRef<Path>, rows: &[FeatureRow], m: usize) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("seq_id,string");
    for i in 0..m {
        out.push_str(&format!(",f_{i}"));
    }
    out.push('\n');
    for row in rows {
        if row.frequencies.len() != m {
            return Err(Error::shape(format!(
                "feature row '{}' has {} frequencies, expected {m}",
                row.seq_id,
                row.frequencies.len()
            )));
        }
        out.push_str(&row.seq_id);
        out.push(',');
        out.push_str(&row.string);
        for f in &row.frequencies {
            out.push_str(&format!(",{f}"));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn load_features_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
    let m = reader
        .headers()
        .map_err(|e| Error::schema(format!("{}: {e}", path.display())))?
        .len()
        .saturating_sub(2);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
        if record.len() != m + 2 {
            return Err(Error::schema(format!(
                "{}: row has {} fields, expected {}",
                path.display(),
                record.len(),
                m + 2
            )));
        }
        let frequencies = record
            .iter()
            .skip(2)
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::schema(format!("{}: frequency '{f}' is not a number", path.display()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(FeatureRow {
            seq_id: record[0].to_string(),
            string: record[1].to_string(),
            frequencies,
        });
    }
    Ok(rows)
}

// -------------------------------------------------------------- diagnostics

/// JSON-lines, one record per round.
pub fn save_diagnostics_jsonl(
    path: impl AsRef<Path>,
    diagnostics: &[RoundDiagnostics],
) -> Result<()> {
    let mut out = String::new();
    for d in diagnostics {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    write_file(path.as_ref(), &out)
}

pub fn load_diagnostics_jsonl(path: impl AsRef<Path>) -> Result<Vec<RoundDiagnostics>> {
    let path = path.as_ref();
    read_file(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_json(path, l))
        .collect()
}
