//! CSV and JSON reading and writing.
//!
//! Tables carry row names in the first column and column names in the first
//! row. Floats are written with the shortest representation that parses back
//! to the same value, so every file reads back exactly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis;
use crate::error::{Error, Result};
use crate::model::{ColumnScaling, CountTable, CovariateSet, ModelParams};
use crate::select::SelectionReport;
use crate::solver::FitResult;

/// Token written for unobserved cells. Empty cells read as missing too.
pub const MISSING_TOKEN: &str = "NA";

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == MISSING_TOKEN
}

fn read_records(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        rows.push(record.iter().map(str::to_owned).collect());
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::parse(path, format!("{other:?}")),
    }
}

/// Header plus named rows. The header may or may not include a corner cell
/// above the row names.
struct NamedGrid {
    col_names: Vec<String>,
    row_names: Vec<String>,
    cells: Vec<Vec<String>>,
}

fn read_named_grid(path: &Path) -> Result<NamedGrid> {
    let mut rows = read_records(path)?.into_iter();
    let header = rows.next().ok_or_else(|| Error::parse(path, "file is empty"))?;
    let body: Vec<Vec<String>> = rows.collect();
    let width = body.first().map_or(header.len(), Vec::len);
    for (k, r) in body.iter().enumerate() {
        if r.len() != width {
            return Err(Error::parse(
                path,
                format!("line {} has {} fields, expected {width}", k + 2, r.len()),
            ));
        }
    }
    if width < 2 {
        return Err(Error::parse(path, "need a name column and at least one value column"));
    }
    let col_names = if header.len() == width {
        header[1..].to_vec()
    } else if header.len() + 1 == width {
        header
    } else {
        return Err(Error::parse(
            path,
            format!("header has {} fields but rows have {width}", header.len()),
        ));
    };
    check_unique(path, &col_names, "column")?;
    let mut row_names = Vec::with_capacity(body.len());
    let mut cells = Vec::with_capacity(body.len());
    for mut r in body {
        let values = r.split_off(1);
        row_names.push(r.pop().unwrap_or_default());
        cells.push(values);
    }
    if row_names.is_empty() {
        return Err(Error::parse(path, "no data rows"));
    }
    check_unique(path, &row_names, "row")?;
    Ok(NamedGrid {
        col_names,
        row_names,
        cells,
    })
}

fn check_unique(path: &Path, names: &[String], what: &str) -> Result<()> {
    let mut seen = HashMap::new();
    for (k, name) in names.iter().enumerate() {
        if name.is_empty() {
            return Err(Error::parse(path, format!("{what} {} has an empty name", k + 1)));
        }
        if seen.insert(name.as_str(), k).is_some() {
            return Err(Error::parse(path, format!("duplicate {what} name '{name}'")));
        }
    }
    Ok(())
}

/// Reads a count table. Empty cells and `NA` are unobserved; every other
/// cell must be a nonnegative integer. Rows or columns without any observed
/// cell are rejected.
pub fn read_count_csv(path: impl AsRef<Path>) -> Result<CountTable> {
    let path = path.as_ref();
    let grid = read_named_grid(path)?;
    let (n, p) = (grid.row_names.len(), grid.col_names.len());
    let mut counts = DMatrix::zeros(n, p);
    let mut mask = DMatrix::from_element(n, p, false);
    for (i, row) in grid.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            if is_missing(cell) {
                continue;
            }
            counts[(i, j)] = cell.parse::<u64>().map_err(|_| {
                Error::parse(
                    path,
                    format!(
                        "cell (row '{}', column '{}') holds '{cell}', not a nonnegative integer count",
                        grid.row_names[i], grid.col_names[j]
                    ),
                )
            })?;
            mask[(i, j)] = true;
        }
    }
    let table = CountTable::new(counts, mask, grid.row_names, grid.col_names)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    table
        .require_full_coverage()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(table)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes(rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    for r in rows {
        // Writing into memory cannot fail.
        w.write_record(&r).expect("in-memory csv write");
    }
    w.into_inner().expect("in-memory csv flush")
}

fn count_table_bytes(table: &CountTable) -> Vec<u8> {
    let header = std::iter::once(String::new()).chain(table.col_names().iter().cloned()).collect();
    let body = (0..table.nrows()).map(|i| {
        std::iter::once(table.row_names()[i].clone())
            .chain((0..table.ncols()).map(|j| match table.count(i, j) {
                Some(y) => y.to_string(),
                None => MISSING_TOKEN.to_string(),
            }))
            .collect()
    });
    csv_bytes(std::iter::once(header).chain(body))
}

/// Writes a count table in the layout read by [`read_count_csv`].
pub fn write_count_csv(path: impl AsRef<Path>, table: &CountTable) -> Result<()> {
    write_file(path.as_ref(), &count_table_bytes(table))
}

fn matrix_bytes(m: &DMatrix<f64>, row_names: &[String], col_names: &[String]) -> Vec<u8> {
    let header = std::iter::once(String::new()).chain(col_names.iter().cloned()).collect();
    let body = m.row_iter().zip(row_names).map(|(r, name)| {
        std::iter::once(name.clone())
            .chain(r.iter().map(|x| x.to_string()))
            .collect()
    });
    csv_bytes(std::iter::once(header).chain(body))
}

/// Writes a real matrix with row and column names.
pub fn write_matrix_csv(
    path: impl AsRef<Path>,
    m: &DMatrix<f64>,
    row_names: &[String],
    col_names: &[String],
) -> Result<()> {
    write_file(path.as_ref(), &matrix_bytes(m, row_names, col_names))
}

/// Covariate values for one side of the table, aligned to its names.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCovariates {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

/// Reads a covariate file whose first column holds identifiers. Rows are
/// reordered to follow `expected_ids`; each id must appear exactly once and
/// every value must be a finite number.
pub fn read_covariate_csv(path: impl AsRef<Path>, expected_ids: &[String]) -> Result<RawCovariates> {
    let path = path.as_ref();
    let grid = read_named_grid(path)?;
    let position: HashMap<&str, usize> = grid
        .row_names
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k))
        .collect();
    if let Some(extra) = grid.row_names.iter().find(|id| !expected_ids.contains(id)) {
        return Err(Error::parse(path, format!("id '{extra}' does not match any table entry")));
    }
    let k = grid.col_names.len();
    let mut values = DMatrix::zeros(expected_ids.len(), k);
    for (i, id) in expected_ids.iter().enumerate() {
        let src = *position
            .get(id.as_str())
            .ok_or_else(|| Error::parse(path, format!("no covariates for id '{id}'")))?;
        for (c, cell) in grid.cells[src].iter().enumerate() {
            let name = &grid.col_names[c];
            if is_missing(cell) {
                return Err(Error::parse(path, format!("missing value for '{name}' at id '{id}'")));
            }
            let x: f64 = cell
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| Error::parse(path, format!("'{cell}' for '{name}' at id '{id}' is not a number")))?;
            values[(i, c)] = x;
        }
    }
    Ok(RawCovariates {
        names: grid.col_names,
        values,
    })
}

/// Loads and standardizes the optional row and column covariate files for
/// `table`.
pub fn load_covariates(
    table: &CountTable,
    row_path: Option<&Path>,
    col_path: Option<&Path>,
) -> Result<CovariateSet> {
    let load = |path: Option<&Path>, ids: &[String]| -> Result<RawCovariates> {
        match path {
            Some(p) => read_covariate_csv(p, ids),
            None => Ok(RawCovariates {
                names: Vec::new(),
                values: DMatrix::zeros(ids.len(), 0),
            }),
        }
    };
    let row = load(row_path, table.row_names())?;
    let col = load(col_path, table.col_names())?;
    CovariateSet::standardize(row.values, row.names, col.values, col.names).map_err(|e| match (e, row_path, col_path) {
        (Error::Invalid(msg), Some(p), _) if msg.starts_with("row") => Error::parse(p, msg),
        (Error::Invalid(msg), _, Some(p)) if msg.starts_with("column") => Error::parse(p, msg),
        (e, _, _) => e,
    })
}

/// Offset and coefficients on one scale, coefficients keyed by covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    pub mu: f64,
    pub alpha: Vec<NamedValue>,
    pub beta: Vec<NamedValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

/// Contents of `params.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub effective_rank: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    /// Coefficients for the standardized covariates used in the fit.
    pub standardized: Effects,
    /// The same effects expressed on the raw covariate scale.
    pub original: Effects,
    pub row_scaling: Vec<ColumnScaling>,
    pub col_scaling: Vec<ColumnScaling>,
    /// Interaction matrix, row by row.
    pub theta: Vec<Vec<f64>>,
    pub objective_trace: Vec<f64>,
}

fn named(names: &[ColumnScaling], values: &DVector<f64>) -> Vec<NamedValue> {
    names
        .iter()
        .zip(values.iter())
        .map(|(s, &value)| NamedValue {
            name: s.name.clone(),
            value,
        })
        .collect()
}

impl ParamsFile {
    pub fn new(fit: &FitResult, cov: &CovariateSet) -> Self {
        let p = &fit.params;
        let (mu, alpha, beta) = cov.to_original_scale(p);
        Self {
            lambda: fit.lambda,
            converged: fit.converged,
            iterations: fit.n_iters,
            objective: fit.objective(),
            effective_rank: fit.effective_rank,
            n_rows: p.theta.nrows(),
            n_cols: p.theta.ncols(),
            standardized: Effects {
                mu: p.mu,
                alpha: named(cov.row_scaling(), &p.alpha),
                beta: named(cov.col_scaling(), &p.beta),
            },
            original: Effects {
                mu,
                alpha: named(cov.row_scaling(), &alpha),
                beta: named(cov.col_scaling(), &beta),
            },
            row_scaling: cov.row_scaling().to_vec(),
            col_scaling: cov.col_scaling().to_vec(),
            theta: p.theta.row_iter().map(|r| r.iter().copied().collect()).collect(),
            objective_trace: fit.objective_trace.clone(),
        }
    }

    /// Fitted parameters on the standardized scale.
    pub fn params(&self) -> Result<ModelParams> {
        if self.theta.len() != self.n_rows || self.theta.iter().any(|r| r.len() != self.n_cols) {
            return Err(Error::DimensionMismatch(format!(
                "interaction rows do not form a {}x{} matrix",
                self.n_rows, self.n_cols
            )));
        }
        let values = |v: &[NamedValue]| DVector::from_iterator(v.len(), v.iter().map(|x| x.value));
        Ok(ModelParams {
            mu: self.standardized.mu,
            alpha: values(&self.standardized.alpha),
            beta: values(&self.standardized.beta),
            theta: DMatrix::from_fn(self.n_rows, self.n_cols, |i, j| self.theta[i][j]),
        })
    }
}

/// Reads `params.json` back into model parameters.
pub fn read_params(path: impl AsRef<Path>) -> Result<ParamsFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Files of one output directory with their checksums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub created_unix_secs: u64,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Collects named file contents and writes them, plus `manifest.json`, into
/// one directory.
#[derive(Debug, Default)]
pub struct OutputSet {
    files: Vec<(String, Vec<u8>)>,
}

impl OutputSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_owned(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.add(name, json_bytes(value)?);
        Ok(())
    }

    pub fn add_csv(&mut self, name: &str, rows: impl IntoIterator<Item = Vec<String>>) {
        self.add(name, csv_bytes(rows));
    }

    /// Keeps only the named files, in their original order.
    pub fn retain(mut self, names: &[&str]) -> Self {
        self.files.retain(|(n, _)| names.contains(&n.as_str()));
        self
    }

    /// Writes every file and the manifest. The manifest is the only file
    /// that carries a timestamp.
    pub fn write(self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            write_file(&dir.join(name), bytes)?;
            entries.push(ManifestEntry {
                file: name.clone(),
                bytes: bytes.len(),
                sha256: sha256_hex(bytes),
            });
        }
        let created_unix_secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let manifest = Manifest {
            created_unix_secs,
            files: entries,
        };
        write_file(&dir.join(MANIFEST_FILE), &json_bytes(&manifest)?)?;
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Recomputes the checksum of every listed file; returns the names that no
/// longer match.
pub fn verify_manifest(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    let mut bad = Vec::new();
    for entry in manifest.files {
        let file: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            bad.push(entry.file);
        }
    }
    Ok(bad)
}

/// Everything written for one fitted table.
pub struct FitOutputs<'a> {
    pub table: &'a CountTable,
    pub cov: &'a CovariateSet,
    pub fit: &'a FitResult,
    pub selection: Option<&'a SelectionReport>,
    /// Requested number of biplot axes, capped at the table's smaller side.
    pub biplot_dim: usize,
}

fn biplot_rows(coords: &analysis::BiplotCoords, table: &CountTable) -> Vec<Vec<String>> {
    let mut rows = vec![["kind", "name"]
        .into_iter()
        .map(str::to_owned)
        .chain((1..=coords.d).map(|k| format!("axis{k}")))
        .collect()];
    for (kind, points, names) in [
        ("row", &coords.row_points, table.row_names()),
        ("col", &coords.col_points, table.col_names()),
    ] {
        for (r, name) in points.row_iter().zip(names) {
            rows.push(
                [kind.to_owned(), name.clone()]
                    .into_iter()
                    .chain(r.iter().map(|x| x.to_string()))
                    .collect(),
            );
        }
    }
    rows
}

fn correlation_rows(corr: Option<&analysis::InteractionCorrelations>, d: usize) -> Vec<Vec<String>> {
    let mut rows = vec![["side", "covariate"]
        .into_iter()
        .map(str::to_owned)
        .chain((1..=d).map(|k| format!("axis{k}")))
        .collect()];
    if let Some(c) = corr {
        for (side, names, values) in [("row", &c.row_names, &c.row), ("col", &c.col_names, &c.col)] {
            for (name, r) in names.iter().zip(values) {
                rows.push(
                    [side.to_owned(), name.clone()]
                        .into_iter()
                        .chain(r.iter().map(|x| x.map_or_else(|| MISSING_TOKEN.to_owned(), |v| v.to_string())))
                        .collect(),
                );
            }
        }
    }
    rows
}

fn decomposition_rows(dec: &analysis::Decomposition, table: &CountTable) -> Vec<Vec<String>> {
    let mut rows = vec![["row", "col", "offset", "row_effect", "col_effect", "interaction", "mean"]
        .into_iter()
        .map(str::to_owned)
        .collect()];
    let product = dec.product();
    for i in 0..table.nrows() {
        for j in 0..table.ncols() {
            rows.push(vec![
                table.row_names()[i].clone(),
                table.col_names()[j].clone(),
                dec.offset[(i, j)].to_string(),
                dec.row[(i, j)].to_string(),
                dec.col[(i, j)].to_string(),
                dec.interaction[(i, j)].to_string(),
                product[(i, j)].to_string(),
            ]);
        }
    }
    rows
}

/// Builds the full result set of a fit: parameters, interaction matrix,
/// fitted and completed tables, biplot, covariate correlations,
/// multiplicative decomposition and the penalty selection report.
pub fn fit_output_set(out: &FitOutputs<'_>) -> Result<OutputSet> {
    let FitOutputs {
        table, cov, fit, ..
    } = *out;
    let rows = table.row_names();
    let cols = table.col_names();
    let mut set = OutputSet::new();
    set.add_json("params.json", &ParamsFile::new(fit, cov))?;
    set.add("theta.csv", matrix_bytes(&fit.params.theta, rows, cols));
    let imputed = analysis::impute(table, &fit.params, cov)?;
    set.add("imputed.csv", matrix_bytes(&imputed, rows, cols));
    let completed = analysis::completed_table(table, &imputed)?;
    set.add("completed.csv", matrix_bytes(&completed, rows, cols));

    let d = out.biplot_dim.clamp(1, table.nrows().min(table.ncols()));
    let coords = analysis::biplot_coordinates(&fit.params.theta, d)?;
    set.add_csv("biplot.csv", biplot_rows(&coords, table));
    let corr = if cov.n_covariates() > 0 {
        Some(analysis::interaction_covariate_correlations(&fit.params.theta, cov, d)?)
    } else {
        None
    };
    set.add_csv("correlations.csv", correlation_rows(corr.as_ref(), d));
    let dec = analysis::multiplicative_decomposition(&fit.params, cov)?;
    set.add_csv("decomposition.csv", decomposition_rows(&dec, table));
    if let Some(report) = out.selection {
        set.add_json("selection.json", report)?;
    }
    Ok(set)
}

/// Writes the full result set of a fit into `dir`.
pub fn write_results(out: &FitOutputs<'_>, dir: impl AsRef<Path>) -> Result<Manifest> {
    fit_output_set(out)?.write(dir)
}

/// Covariate matrix as CSV with the ids in the first column.
pub fn covariate_bytes(ids: &[String], names: &[String], values: &DMatrix<f64>) -> Vec<u8> {
    matrix_bytes(values, ids, names)
}

pub fn count_table_csv(table: &CountTable) -> Vec<u8> {
    count_table_bytes(table)
}
