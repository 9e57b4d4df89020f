//! CSV and JSON files used by the command line and the studies.
//!
//! Matrices are headerless CSV, one observation per row. Floats are written
//! in shortest round-trip form so that reruns are byte-identical.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::process::{CovariateSpec, Dataset, ModelParameters};

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidData(format!("{}: row {}: cannot parse {field:?}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("{}: row {} has a non-finite value", path.display(), i + 1)));
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::InvalidData(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::InvalidData(format!("{}: no data", path.display())));
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Shortest round-trip decimal, switching to exponent form for very small
/// or very large magnitudes.
fn format_float(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.row_iter() {
        writer.write_record(row.iter().map(|&v| format_float(v)))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Serialized form of [`ModelParameters`]; matrices are lists of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaFile {
    pub y0: Vec<f64>,
    #[serde(rename = "U")]
    pub frame: Vec<Vec<f64>>,
    #[serde(rename = "W_tilde")]
    pub w_tilde: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub tau: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidData(format!("{name} must be a non-empty rectangular list of rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl ThetaFile {
    pub fn from_parameters(theta: &ModelParameters) -> Self {
        Self {
            y0: theta.y0.iter().copied().collect(),
            frame: rows_of(&theta.frame),
            w_tilde: rows_of(&theta.w_tilde),
            beta: theta.beta.iter().copied().collect(),
            tau: theta.tau,
        }
    }

    /// Validated parameters; the frame must already be orthonormal.
    pub fn to_parameters(&self, model: &Manifold) -> Result<ModelParameters> {
        ModelParameters::new(
            model,
            DVector::from_vec(self.y0.clone()),
            matrix_from_rows(&self.frame, "U")?,
            matrix_from_rows(&self.w_tilde, "W_tilde")?,
            DVector::from_vec(self.beta.clone()),
            self.tau,
        )
    }
}

/// Written next to every output so a run can be repeated exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
        }
    }
}

/// Loads shapes (`n x k`), covariates (`n x m`) and the covariate spec.
pub fn load_dataset(shapes: &Path, covariates: &Path, spec: &Path) -> Result<Dataset> {
    let y = read_matrix_csv(shapes)?;
    let x = read_matrix_csv(covariates)?;
    let spec: CovariateSpec = read_json(spec)?;
    Dataset::new(x, y, spec)
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    write_matrix_csv(&dir.join("shapes.csv"), &data.y)?;
    write_matrix_csv(&dir.join("covariates.csv"), &data.x)?;
    write_json(&dir.join("spec.json"), &data.spec)
}
