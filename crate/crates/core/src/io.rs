//! File formats. JSON for parameters, configs and reports; headed CSV for
//! per-unit matrices. Every write goes to a temporary file in the target
//! directory and is renamed into place.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dims;
use crate::sampler::SimTruth;
use crate::{Bounds, Dataset, ExtendedParams, JointParams, PopulationMatrix, UnitFields};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::Reader::from_reader(File::open(path).map_err(|e| io_err(path, e))?))
}

fn parse_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Parse { path: path.to_path_buf(), message: message.to_string() }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| parse_err(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| parse_err(path, e))
}

/// Constraint constants and block sizes of a model (`bounds.json`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub alpha: f64,
    pub beta: f64,
    pub x_max: f64,
    #[serde(default)]
    pub p_v: usize,
    #[serde(default)]
    pub p_a: usize,
    pub p_y: usize,
    /// Half-width accepted for observed data; defaults to `x_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<f64>,
}

impl ModelSpec {
    pub fn bounds(&self) -> Result<Bounds> {
        Bounds::new(self.alpha, self.beta, self.x_max)
    }

    pub fn dims(&self, n: usize) -> Result<Dims> {
        Dims::new(self.p_v, self.p_a, self.p_y, n)
    }

    pub fn p(&self) -> usize {
        self.p_v + self.p_a + self.p_y
    }
}

fn matrix_to_csv(prefix: &str, m: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (1..=m.ncols()).map(|k| format!("{prefix}{k}")).collect();
    let err = |e: csv::Error| Error::invalid(format!("csv encoding failed: {e}"));
    w.write_record(&header).map_err(err)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv encoding failed: {e}")))
}

/// Headed CSV with columns `{prefix}1..{prefix}k`.
pub fn write_matrix_csv(path: &Path, prefix: &str, m: ArrayView2<'_, f64>) -> Result<()> {
    write_atomic(path, &matrix_to_csv(prefix, m)?)
}

/// Reads a headed numeric CSV; the header must be `{prefix}1..{prefix}k`.
pub fn read_matrix_csv(path: &Path, prefix: &str) -> Result<Array2<f64>> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| parse_err(path, e))?.clone();
    for (k, h) in header.iter().enumerate() {
        if h.trim() != format!("{prefix}{}", k + 1) {
            return Err(parse_err(path, format!("column {} is '{h}', expected '{prefix}{}'", k + 1, k + 1)));
        }
    }
    let cols = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        if rec.len() != cols {
            return Err(parse_err(path, format!("row {} has {} fields, expected {cols}", line + 1, rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| parse_err(path, format!("row {}: '{field}': {e}", line + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| parse_err(path, e))
}

/// Headed CSV of serializable rows, one row per item.
pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let err = |e: csv::Error| parse_err(path, e);
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| parse_err(path, e))?;
    write_atomic(path, &bytes)
}

pub fn read_rows_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv_reader(path)?;
    r.deserialize().map(|row| row.map_err(|e| parse_err(path, e))).collect()
}

/// `data.csv` with columns `x1..xp`, checked against the model spec.
pub fn read_dataset(path: &Path, spec: &ModelSpec) -> Result<Dataset> {
    let x = read_matrix_csv(path, "x")?;
    if x.ncols() != spec.p() {
        return Err(parse_err(path, format!("{} columns, the model has p = {}", x.ncols(), spec.p())));
    }
    let dims = spec.dims(x.nrows())?;
    Dataset::with_support(x, dims, spec.x_max, spec.support.unwrap_or(spec.x_max))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_matrix_csv(path, "x", data.x())
}

/// `mask.csv`: a `clean` column of 0/1 flags.
pub fn write_mask(path: &Path, clean: &[bool]) -> Result<()> {
    let mut out = String::from("clean\n");
    for &c in clean {
        out.push_str(if c { "1\n" } else { "0\n" });
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| parse_err(path, e))?.clone();
    if header.len() != 1 || header[0].trim() != "clean" {
        return Err(parse_err(path, "expected a single 'clean' column"));
    }
    r.records()
        .enumerate()
        .map(|(line, rec)| {
            let rec = rec.map_err(|e| parse_err(path, e))?;
            match rec[0].trim() {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                other => Err(parse_err(path, format!("row {}: '{other}' is not 0 or 1", line + 1))),
            }
        })
        .collect()
}

fn rows_of(m: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix_of(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<Array2<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid(format!("{what}: every row must have {cols} entries")));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| Error::invalid(format!("{what}: {e}")))
}

/// `fit.json`: interaction matrix and unit fields, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub population: Vec<Vec<f64>>,
    pub units: Vec<Vec<f64>>,
}

impl From<&ExtendedParams> for FitFile {
    fn from(p: &ExtendedParams) -> Self {
        FitFile { population: rows_of(p.population.view()), units: rows_of(p.units.view()) }
    }
}

impl FitFile {
    pub fn into_params(self) -> Result<ExtendedParams> {
        let p = self.population.len();
        let pop = PopulationMatrix::new(matrix_of(&self.population, p, "population")?)?;
        let units = UnitFields::new(matrix_of(&self.units, p, "units")?)?;
        ExtendedParams::new(pop, units)
    }
}

pub fn write_fit(path: &Path, params: &ExtendedParams) -> Result<()> {
    write_json(path, &FitFile::from(params))
}

pub fn read_fit(path: &Path) -> Result<ExtendedParams> {
    read_json::<FitFile>(path)?.into_params().map_err(|e| parse_err(path, e))
}

/// `(phi, Phi)` with `Phi` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFile {
    pub phi: Vec<f64>,
    #[serde(rename = "Phi")]
    pub interaction: Vec<Vec<f64>>,
}

impl From<&JointParams> for JointFile {
    fn from(j: &JointParams) -> Self {
        JointFile { phi: j.phi.to_vec(), interaction: rows_of(j.interaction.view()) }
    }
}

impl JointFile {
    pub fn into_params(self) -> Result<JointParams> {
        let p = self.phi.len();
        JointParams::new(Array1::from(self.phi), matrix_of(&self.interaction, p, "Phi")?)
    }
}

/// `truth.json` of a simulated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    #[serde(flatten)]
    pub joint: JointFile,
    pub p_v: usize,
    pub p_a: usize,
    pub p_y: usize,
    pub n: usize,
    pub x_max: f64,
    pub kappa: f64,
    pub delta_v: Vec<Vec<f64>>,
    pub clean_mask: Vec<bool>,
    pub latent: Vec<Vec<f64>>,
}

impl From<&SimTruth> for TruthFile {
    fn from(t: &SimTruth) -> Self {
        TruthFile {
            joint: JointFile::from(&t.joint),
            p_v: t.dims.p_v,
            p_a: t.dims.p_a,
            p_y: t.dims.p_y,
            n: t.dims.n,
            x_max: t.x_max,
            kappa: t.kappa,
            delta_v: rows_of(t.delta_v.view()),
            clean_mask: t.clean_mask.clone(),
            latent: rows_of(t.latent.view()),
        }
    }
}

impl TruthFile {
    pub fn into_truth(self) -> Result<SimTruth> {
        let dims = Dims::new(self.p_v, self.p_a, self.p_y, self.n)?;
        let joint = self.joint.into_params()?;
        if joint.p() != dims.p() || self.clean_mask.len() != dims.n {
            return Err(Error::invalid("truth dimensions are inconsistent"));
        }
        Ok(SimTruth {
            joint,
            dims,
            x_max: self.x_max,
            kappa: self.kappa,
            delta_v: matrix_of(&self.delta_v, dims.p_v, "delta_v")?,
            clean_mask: self.clean_mask,
            latent: matrix_of(&self.latent, dims.p(), "latent")?,
        })
    }
}

pub fn write_truth(path: &Path, truth: &SimTruth) -> Result<()> {
    write_json(path, &TruthFile::from(truth))
}

pub fn read_truth(path: &Path) -> Result<SimTruth> {
    read_json::<TruthFile>(path)?.into_truth().map_err(|e| parse_err(path, e))
}
