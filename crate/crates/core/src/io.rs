//! On-disk formats: dataset manifests and CSV tables, prior files, fit
//! reports, chain matrices, latent summaries and density tables.
//!
//! All numeric text is written with Rust's shortest round-trip formatting,
//! so `parse(write(x)) == x` bit-exactly for every finite `f64`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gibbs::GibbsChain;
use crate::model::{FitReport, GeneratingParams, PriorSpec, SurDataset, CONST_MARKER};
use crate::stats::PdMatrix;
use crate::{Error, Result};

/// Maps columns of a delimited data table onto the equations of a system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Path of the data table, relative to the manifest file.
    pub data: String,
    pub exposure: bool,
    pub equations: Vec<EquationSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquationSpec {
    pub response: String,
    /// Covariate columns; the marker `__const__` synthesizes a constant.
    pub covariates: Vec<String>,
    /// Column holding the mismeasured reading.
    pub reading: String,
}

/// Method-and-settings bundle for one estimator run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: crate::simulate::EstimatorKind,
    pub draws: usize,
    pub burnin: usize,
    pub thin: usize,
    pub tol: f64,
    pub max_cycles: usize,
    pub seed: u64,
    pub priors: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    if manifest.equations.is_empty() {
        return Err(Error::parse(format!(
            "{}: manifest needs at least one equation",
            path.display()
        )));
    }
    Ok(manifest)
}

/// Read the manifest at `path` and load the dataset it describes.
pub fn load_dataset(path: &Path) -> Result<SurDataset> {
    let manifest = load_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_dataset_with(&manifest, base)
}

pub fn load_dataset_with(manifest: &DatasetManifest, base: &Path) -> Result<SurDataset> {
    let data_path = base.join(&manifest.data);
    let mut reader = csv::Reader::from_path(&data_path)
        .map_err(|e| Error::parse(format!("{}: {e}", data_path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(format!("{}: {e}", data_path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut duplicates = BTreeSet::new();
    for (i, h) in headers.iter().enumerate() {
        if headers[..i].contains(h) {
            duplicates.insert(h.clone());
        }
    }
    if !duplicates.is_empty() {
        return Err(Error::parse(format!(
            "{}: duplicate columns {:?}",
            data_path.display(),
            duplicates
        )));
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(format!("{}: no column `{name}`", data_path.display())))
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ridx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(format!("{}: {e}", data_path.display())))?;
        let mut row = Vec::with_capacity(headers.len());
        for (cidx, field) in record.iter().enumerate() {
            row.push(field.trim().parse::<f64>().map_err(|_| {
                Error::parse(format!(
                    "{}: non-numeric value `{field}` at row {}, column `{}`",
                    data_path.display(),
                    ridx + 2,
                    headers.get(cidx).map(String::as_str).unwrap_or("?")
                ))
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(format!("{}: no data rows", data_path.display())));
    }
    let n = rows.len();
    let m = manifest.equations.len();

    let mut y = DMatrix::zeros(n, m);
    let mut w = DMatrix::zeros(n, m);
    let mut x = Vec::with_capacity(m);
    for (eq, spec) in manifest.equations.iter().enumerate() {
        let yc = col(&spec.response)?;
        let wc = col(&spec.reading)?;
        for i in 0..n {
            y[(i, eq)] = rows[i][yc];
            w[(i, eq)] = rows[i][wc];
        }
        let mut block = DMatrix::zeros(n, spec.covariates.len());
        for (j, name) in spec.covariates.iter().enumerate() {
            if name == CONST_MARKER {
                for i in 0..n {
                    block[(i, j)] = 1.0;
                }
            } else {
                let c = col(name)?;
                for i in 0..n {
                    block[(i, j)] = rows[i][c];
                }
            }
        }
        x.push(block);
    }
    Ok(SurDataset {
        y,
        w,
        x,
        truth: None,
    })
}

/// Write `data.csv` + `manifest.toml` (+ `truth_z.csv`, `truth_params.toml`
/// when ground truth is present) under `dir`.
pub fn save_dataset(data: &SurDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let m = data.m();
    let n = data.n();

    let mut headers = Vec::new();
    for eq in 0..m {
        headers.push(format!("y{}", eq + 1));
    }
    for eq in 0..m {
        headers.push(format!("w{}", eq + 1));
    }
    for (eq, xm) in data.x.iter().enumerate() {
        for j in 0..xm.ncols() {
            headers.push(format!("x{}_{}", eq + 1, j + 1));
        }
    }
    let data_path = dir.join("data.csv");
    let mut out = csv::Writer::from_path(&data_path)?;
    out.write_record(&headers)?;
    for i in 0..n {
        let mut record: Vec<String> = Vec::with_capacity(headers.len());
        for eq in 0..m {
            record.push(format!("{}", data.y[(i, eq)]));
        }
        for eq in 0..m {
            record.push(format!("{}", data.w[(i, eq)]));
        }
        for xm in &data.x {
            for j in 0..xm.ncols() {
                record.push(format!("{}", xm[(i, j)]));
            }
        }
        out.write_record(&record)?;
    }
    out.flush()?;

    let manifest = DatasetManifest {
        data: "data.csv".into(),
        exposure: true,
        equations: (0..m)
            .map(|eq| EquationSpec {
                response: format!("y{}", eq + 1),
                covariates: (0..data.x[eq].ncols())
                    .map(|j| format!("x{}_{}", eq + 1, j + 1))
                    .collect(),
                reading: format!("w{}", eq + 1),
            })
            .collect(),
    };
    let manifest_path = dir.join("manifest.toml");
    fs::write(&manifest_path, toml::to_string_pretty(&manifest).unwrap())?;

    if let Some(truth) = &data.truth {
        let mut out = csv::Writer::from_path(dir.join("truth_z.csv"))?;
        out.write_record((0..m).map(|eq| format!("z{}", eq + 1)))?;
        for i in 0..n {
            out.write_record((0..m).map(|eq| format!("{}", truth.z[(i, eq)])))?;
        }
        out.flush()?;
        fs::write(
            dir.join("truth_params.toml"),
            toml::to_string_pretty(&truth.params).unwrap(),
        )?;
    }
    Ok(manifest_path)
}

pub fn load_truth_params(dir: &Path) -> Result<GeneratingParams> {
    let text = fs::read_to_string(dir.join("truth_params.toml"))?;
    toml::from_str(&text).map_err(|e| Error::parse(format!("truth_params.toml: {e}")))
}

// ---------------------------------------------------------------------------
// Prior files
// ---------------------------------------------------------------------------

/// Scalar shorthand (`c` meaning `c·I` or a constant vector) or the full
/// object, as written in prior files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOr<T> {
    Scalar(f64),
    Full(T),
}

/// Prior file contents; every field is optional and falls back to the
/// reference priors of [`PriorSpec::vague`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsFile {
    pub beta0: Option<ScalarOr<Vec<f64>>>,
    pub b0: Option<ScalarOr<Vec<Vec<f64>>>>,
    pub gamma0: Option<ScalarOr<Vec<f64>>>,
    pub g0: Option<ScalarOr<Vec<Vec<f64>>>>,
    pub nu0: Option<f64>,
    pub s0: Option<ScalarOr<Vec<Vec<f64>>>>,
    pub omega0: Option<ScalarOr<Vec<f64>>>,
    pub o0: Option<ScalarOr<Vec<Vec<f64>>>>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub delta3: Option<f64>,
    pub delta4: Option<f64>,
    pub exposure: Option<bool>,
    pub mu0: Option<ScalarOr<Vec<f64>>>,
    pub sigma_mu2: Option<f64>,
}

fn to_vector(v: &ScalarOr<Vec<f64>>, len: usize, name: &str) -> Result<DVector<f64>> {
    match v {
        ScalarOr::Scalar(c) => Ok(DVector::from_element(len, *c)),
        ScalarOr::Full(vals) => {
            if vals.len() != len {
                return Err(Error::dimension(format!(
                    "prior `{name}` must have length {len}, got {}",
                    vals.len()
                )));
            }
            Ok(DVector::from_column_slice(vals))
        }
    }
}

fn to_pd(v: &ScalarOr<Vec<Vec<f64>>>, dim: usize, name: &str) -> Result<PdMatrix> {
    let mat = match v {
        ScalarOr::Scalar(c) => DMatrix::identity(dim, dim) * *c,
        ScalarOr::Full(rows) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::dimension(format!(
                    "prior `{name}` must be {dim}x{dim}"
                )));
            }
            DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
        }
    };
    PdMatrix::new(mat, name)
}

impl PriorsFile {
    pub fn into_prior_spec(&self, m: usize, k_total: usize) -> Result<PriorSpec> {
        let defaults = PriorSpec::vague(m, k_total);
        Ok(PriorSpec {
            beta0: match &self.beta0 {
                Some(v) => to_vector(v, k_total, "beta0")?,
                None => defaults.beta0,
            },
            b0: match &self.b0 {
                Some(v) => to_pd(v, k_total, "B0")?,
                None => defaults.b0,
            },
            gamma0: match &self.gamma0 {
                Some(v) => to_vector(v, m, "gamma0")?,
                None => defaults.gamma0,
            },
            g0: match &self.g0 {
                Some(v) => to_pd(v, m, "G0")?,
                None => defaults.g0,
            },
            nu0: self.nu0.unwrap_or(defaults.nu0),
            s0: match &self.s0 {
                Some(v) => to_pd(v, m, "S0")?,
                None => defaults.s0,
            },
            omega0: match &self.omega0 {
                Some(v) => to_vector(v, k_total, "omega0")?,
                None => defaults.omega0,
            },
            o0: match &self.o0 {
                Some(v) => to_pd(v, k_total, "O0")?,
                None => defaults.o0,
            },
            delta1: self.delta1.unwrap_or(defaults.delta1),
            delta2: self.delta2.unwrap_or(defaults.delta2),
            delta3: self.delta3.unwrap_or(defaults.delta3),
            delta4: self.delta4.unwrap_or(defaults.delta4),
            exposure: self.exposure.unwrap_or(defaults.exposure),
            mu0: match &self.mu0 {
                Some(v) => to_vector(v, m, "mu0")?,
                None => defaults.mu0,
            },
            sigma_mu2: self.sigma_mu2.unwrap_or(defaults.sigma_mu2),
        })
    }
}

/// Load priors from a TOML file, or the reference defaults when `path` is
/// `None`. `default_exposure` (normally the dataset manifest's flag) applies
/// unless the prior file sets `exposure` itself.
pub fn load_priors(
    path: Option<&Path>,
    m: usize,
    k_total: usize,
    default_exposure: bool,
) -> Result<PriorSpec> {
    let mut spec = match path {
        None => PriorSpec::vague(m, k_total),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let file: PriorsFile = toml::from_str(&text)
                .map_err(|e| Error::parse(format!("{}: {e}", p.display())))?;
            let explicit = file.exposure;
            let mut spec = file.into_prior_spec(m, k_total)?;
            spec.exposure = explicit.unwrap_or(default_exposure);
            return Ok(spec);
        }
    };
    spec.exposure = default_exposure;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Reports, chains, densities
// ---------------------------------------------------------------------------

pub fn save_report(report: &FitReport, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(report)
        .map_err(|e| Error::parse(format!("report serialization: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<FitReport> {
    let text = fs::read_to_string(path)?;
    let report: FitReport =
        toml::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    if report.schema != crate::model::REPORT_SCHEMA {
        return Err(Error::parse(format!(
            "{}: unsupported report schema `{}`",
            path.display(),
            report.schema
        )));
    }
    Ok(report)
}

/// Draw matrix with named columns, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTable {
    pub columns: Vec<String>,
    pub draws: Vec<Vec<f64>>,
}

impl From<&GibbsChain> for ChainTable {
    fn from(chain: &GibbsChain) -> Self {
        ChainTable {
            columns: chain.columns.clone(),
            draws: chain.draws.clone(),
        }
    }
}

/// Header line of parameter names, one comma-separated row per retained
/// draw.
pub fn write_chain(table: &ChainTable, path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(&table.columns)?;
    for row in &table.draws {
        out.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_chain(path: &Path) -> Result<ChainTable> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut draws = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
        let row: Vec<f64> = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::parse(format!("{}: bad value `{f}`", path.display())))
            })
            .collect::<Result<_>>()?;
        draws.push(row);
    }
    Ok(ChainTable { columns, draws })
}

/// Latent summaries keyed by `(observation, equation)`.
pub fn write_z_summary(
    mean: &DMatrix<f64>,
    var: &DMatrix<f64>,
    path: &Path,
) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["i", "m", "mean", "var"])?;
    for i in 0..mean.nrows() {
        for j in 0..mean.ncols() {
            out.write_record([
                format!("{}", i + 1),
                format!("{}", j + 1),
                format!("{}", mean[(i, j)]),
                format!("{}", var[(i, j)]),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Two-column grid/density table.
pub fn write_density(grid: &[f64], density: &[f64], path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["grid", "density"])?;
    for (g, d) in grid.iter().zip(density) {
        out.write_record([format!("{g}"), format!("{d}")])?;
    }
    out.flush()?;
    Ok(())
}

/// ELBO trace, one row per evaluation (cycle 0 is the initial state).
pub fn write_elbo_trace(trace: &[f64], path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["cycle", "elbo"])?;
    for (c, e) in trace.iter().enumerate() {
        out.write_record([format!("{c}"), format!("{e}")])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
