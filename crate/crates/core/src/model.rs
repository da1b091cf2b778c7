//! Data types of the model, the natural-parameter construction and the
//! Poisson data-fit term with its gradient.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Natural parameters above this value are treated as divergence.
pub const DEFAULT_EXP_CAP: f64 = 30.0;

/// Count matrix with an explicit observation mask.
///
/// Values stored under a `false` mask entry are kept (validation splits need
/// them) but no loss computation ever reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    counts: DMatrix<u64>,
    mask: DMatrix<bool>,
    observed_values: DMatrix<f64>,
    weights: DMatrix<f64>,
    row_names: Vec<String>,
    col_names: Vec<String>,
}

impl CountTable {
    pub fn new(
        counts: DMatrix<u64>,
        mask: DMatrix<bool>,
        row_names: Vec<String>,
        col_names: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = counts.shape();
        if n == 0 || p == 0 {
            return Err(Error::Invalid("count table must have at least one row and column".into()));
        }
        if mask.shape() != (n, p) {
            return Err(Error::DimensionMismatch(format!(
                "mask is {:?}, counts are {:?}",
                mask.shape(),
                (n, p)
            )));
        }
        if row_names.len() != n || col_names.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{} row names and {} column names for a {n}x{p} table",
                row_names.len(),
                col_names.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Invalid("count table has no observed cell".into()));
        }
        let weights = mask.map(|m| if m { 1.0 } else { 0.0 });
        let observed_values = DMatrix::from_fn(n, p, |i, j| {
            if mask[(i, j)] {
                counts[(i, j)] as f64
            } else {
                0.0
            }
        });
        Ok(Self {
            counts,
            mask,
            observed_values,
            weights,
            row_names,
            col_names,
        })
    }

    /// Table with generated names `r1..rn`, `c1..cp`.
    pub fn from_counts(counts: DMatrix<u64>, mask: DMatrix<bool>) -> Result<Self> {
        let (n, p) = counts.shape();
        Self::new(counts, mask, default_names("r", n), default_names("c", p))
    }

    pub fn fully_observed(counts: DMatrix<u64>) -> Result<Self> {
        let mask = DMatrix::from_element(counts.nrows(), counts.ncols(), true);
        Self::from_counts(counts, mask)
    }

    pub fn nrows(&self) -> usize {
        self.counts.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.counts.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.counts.shape()
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    /// The count at an observed cell, `None` when masked.
    pub fn count(&self, i: usize, j: usize) -> Option<u64> {
        self.mask[(i, j)].then(|| self.counts[(i, j)])
    }

    /// Stored value regardless of the mask; used to score held-out cells.
    pub fn stored_count(&self, i: usize, j: usize) -> u64 {
        self.counts[(i, j)]
    }

    pub fn stored_counts(&self) -> &DMatrix<u64> {
        &self.counts
    }

    /// Observed counts as reals, zero at masked cells.
    pub fn observed_values(&self) -> &DMatrix<f64> {
        &self.observed_values
    }

    /// The 0/1 observation indicator as reals.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn row_names(&self) -> &[String] {
        &self.row_names
    }

    pub fn col_names(&self) -> &[String] {
        &self.col_names
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn observed_total(&self) -> f64 {
        self.observed_values.sum()
    }

    /// Iterator over `(i, j, count)` for observed cells, column-major.
    pub fn observed_cells(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        let n = self.nrows();
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(k, _)| (k % n, k / n, self.counts[(k % n, k / n)]))
    }

    /// Same stored values under a different mask.
    pub fn with_mask(&self, mask: DMatrix<bool>) -> Result<Self> {
        Self::new(
            self.counts.clone(),
            mask,
            self.row_names.clone(),
            self.col_names.clone(),
        )
    }

    /// Same mask and names with new counts.
    pub fn with_counts(&self, counts: DMatrix<u64>) -> Result<Self> {
        Self::new(
            counts,
            self.mask.clone(),
            self.row_names.clone(),
            self.col_names.clone(),
        )
    }

    /// Rejects tables in which some row or column has no observed cell.
    pub fn require_full_coverage(&self) -> Result<()> {
        for (i, row) in self.mask.row_iter().enumerate() {
            if !row.iter().any(|&m| m) {
                return Err(Error::Invalid(format!(
                    "row '{}' has no observed cell",
                    self.row_names[i]
                )));
            }
        }
        for (j, col) in self.mask.column_iter().enumerate() {
            if !col.iter().any(|&m| m) {
                return Err(Error::Invalid(format!(
                    "column '{}' has no observed cell",
                    self.col_names[j]
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn default_names(prefix: &str, len: usize) -> Vec<String> {
    (1..=len).map(|k| format!("{prefix}{k}")).collect()
}

/// Centering and scaling applied to one covariate column.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ColumnScaling {
    pub name: String,
    pub mean: f64,
    pub scale: f64,
}

/// Row covariates (`n x K1`) and column covariates (`p x K2`) on the
/// standardized scale, with the transformation that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSet {
    row: DMatrix<f64>,
    col: DMatrix<f64>,
    row_scaling: Vec<ColumnScaling>,
    col_scaling: Vec<ColumnScaling>,
}

impl CovariateSet {
    pub fn none(n: usize, p: usize) -> Self {
        Self {
            row: DMatrix::zeros(n, 0),
            col: DMatrix::zeros(p, 0),
            row_scaling: Vec::new(),
            col_scaling: Vec::new(),
        }
    }

    /// Centers every column and divides by its sample standard deviation.
    pub fn standardize(
        row: DMatrix<f64>,
        row_names: Vec<String>,
        col: DMatrix<f64>,
        col_names: Vec<String>,
    ) -> Result<Self> {
        let (row, row_scaling) = standardize_columns(row, row_names, "row")?;
        let (col, col_scaling) = standardize_columns(col, col_names, "column")?;
        Ok(Self {
            row,
            col,
            row_scaling,
            col_scaling,
        })
    }

    /// Matrices already on the working scale; the recorded transformation is
    /// the identity.
    pub fn from_scaled(row: DMatrix<f64>, col: DMatrix<f64>) -> Result<Self> {
        if row.iter().chain(col.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("covariates"));
        }
        let identity = |prefix: &str, k: usize| {
            default_names(prefix, k)
                .into_iter()
                .map(|name| ColumnScaling {
                    name,
                    mean: 0.0,
                    scale: 1.0,
                })
                .collect::<Vec<_>>()
        };
        let row_scaling = identity("row_cov", row.ncols());
        let col_scaling = identity("col_cov", col.ncols());
        Ok(Self {
            row,
            col,
            row_scaling,
            col_scaling,
        })
    }

    pub fn row(&self) -> &DMatrix<f64> {
        &self.row
    }

    pub fn col(&self) -> &DMatrix<f64> {
        &self.col
    }

    pub fn k_row(&self) -> usize {
        self.row.ncols()
    }

    pub fn k_col(&self) -> usize {
        self.col.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.k_row() + self.k_col()
    }

    pub fn row_scaling(&self) -> &[ColumnScaling] {
        &self.row_scaling
    }

    pub fn col_scaling(&self) -> &[ColumnScaling] {
        &self.col_scaling
    }

    pub fn check_table(&self, table: &CountTable) -> Result<()> {
        if self.row.nrows() != table.nrows() || self.col.nrows() != table.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "covariates cover {}x{} cells, table is {}x{}",
                self.row.nrows(),
                self.col.nrows(),
                table.nrows(),
                table.ncols()
            )));
        }
        Ok(())
    }

    /// Offset and coefficients expressed on the raw covariate scale.
    pub fn to_original_scale(&self, params: &ModelParams) -> (f64, DVector<f64>, DVector<f64>) {
        let mut mu = params.mu;
        let alpha = DVector::from_fn(self.k_row(), |k, _| {
            let s = &self.row_scaling[k];
            mu -= params.alpha[k] * s.mean / s.scale;
            params.alpha[k] / s.scale
        });
        let beta = DVector::from_fn(self.k_col(), |k, _| {
            let s = &self.col_scaling[k];
            mu -= params.beta[k] * s.mean / s.scale;
            params.beta[k] / s.scale
        });
        (mu, alpha, beta)
    }
}

fn standardize_columns(
    mut m: DMatrix<f64>,
    names: Vec<String>,
    side: &str,
) -> Result<(DMatrix<f64>, Vec<ColumnScaling>)> {
    if names.len() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} names for {} {side} covariates",
            names.len(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("covariates"));
    }
    let n = m.nrows();
    if m.ncols() > 0 && n < 2 {
        return Err(Error::Invalid(format!(
            "{side} covariates need at least two entries to be standardized"
        )));
    }
    let mut scaling = Vec::with_capacity(m.ncols());
    for (mut c, name) in m.column_iter_mut().zip(names) {
        let mean = c.sum() / n as f64;
        let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let scale = var.sqrt();
        if !(scale > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::Invalid(format!("{side} covariate '{name}' is constant")));
        }
        c.apply(|x| *x = (*x - mean) / scale);
        scaling.push(ColumnScaling { name, mean, scale });
    }
    Ok((m, scaling))
}

/// Offset, covariate coefficients and interaction matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mu: f64,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub theta: DMatrix<f64>,
}

impl ModelParams {
    pub fn zeros(n: usize, p: usize, k_row: usize, k_col: usize) -> Self {
        Self {
            mu: 0.0,
            alpha: DVector::zeros(k_row),
            beta: DVector::zeros(k_col),
            theta: DMatrix::zeros(n, p),
        }
    }

    pub fn zeros_for(table: &CountTable, cov: &CovariateSet) -> Self {
        Self::zeros(table.nrows(), table.ncols(), cov.k_row(), cov.k_col())
    }

    pub fn check_dims(&self, cov: &CovariateSet) -> Result<()> {
        if self.alpha.len() != cov.k_row()
            || self.beta.len() != cov.k_col()
            || self.theta.nrows() != cov.row().nrows()
            || self.theta.ncols() != cov.col().nrows()
        {
            return Err(Error::DimensionMismatch(format!(
                "params (K1={}, K2={}, theta {:?}) vs covariates (K1={}, K2={}, {}x{})",
                self.alpha.len(),
                self.beta.len(),
                self.theta.shape(),
                cov.k_row(),
                cov.k_col(),
                cov.row().nrows(),
                cov.col().nrows()
            )));
        }
        Ok(())
    }
}

/// The matrix of natural (log-mean) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParamMatrix(pub DMatrix<f64>);

impl NaturalParamMatrix {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Projects every entry onto `[-gamma, gamma]`.
    pub fn clamp(mut self, gamma: f64) -> Self {
        self.0.apply(|x| *x = x.clamp(-gamma, gamma));
        self
    }

    /// Elementwise `exp`, the fitted Poisson means.
    pub fn means(&self) -> DMatrix<f64> {
        self.0.map(f64::exp)
    }
}

/// `mu + R alpha + C beta` broadcast over the table, without the interaction.
pub fn main_effects(
    mu: f64,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    cov: &CovariateSet,
) -> Result<DMatrix<f64>> {
    if alpha.len() != cov.k_row() || beta.len() != cov.k_col() {
        return Err(Error::DimensionMismatch(format!(
            "{} row and {} column coefficients for {} and {} covariates",
            alpha.len(),
            beta.len(),
            cov.k_row(),
            cov.k_col()
        )));
    }
    let row_effect = cov.row() * alpha;
    let col_effect = cov.col() * beta;
    Ok(DMatrix::from_fn(row_effect.len(), col_effect.len(), |i, j| {
        mu + row_effect[i] + col_effect[j]
    }))
}

pub fn build_natural_params(params: &ModelParams, cov: &CovariateSet) -> Result<NaturalParamMatrix> {
    params.check_dims(cov)?;
    let mut x = main_effects(params.mu, &params.alpha, &params.beta, cov)?;
    x += &params.theta;
    Ok(NaturalParamMatrix(x))
}

fn check_shapes(table: &CountTable, x: &DMatrix<f64>) -> Result<()> {
    if table.shape() != x.shape() {
        return Err(Error::DimensionMismatch(format!(
            "table is {:?}, natural parameters are {:?}",
            table.shape(),
            x.shape()
        )));
    }
    Ok(())
}

fn capped_exp(x: f64, i: usize, j: usize, cap: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite("natural parameters"));
    }
    if x > cap {
        return Err(Error::NumericRange {
            row: i,
            col: j,
            value: x,
            cap,
        });
    }
    Ok(x.exp())
}

/// Poisson negative log-likelihood (up to constants) over observed cells.
pub fn data_fit(table: &CountTable, x: &NaturalParamMatrix) -> Result<f64> {
    data_fit_capped(table, x.as_matrix(), DEFAULT_EXP_CAP)
}

pub fn data_fit_capped(table: &CountTable, x: &DMatrix<f64>, exp_cap: f64) -> Result<f64> {
    check_shapes(table, x)?;
    let (n, p) = x.shape();
    let mask = table.mask();
    let y = table.observed_values();
    let mut total = 0.0;
    for j in 0..p {
        for i in 0..n {
            if mask[(i, j)] {
                let xij = x[(i, j)];
                total += capped_exp(xij, i, j, exp_cap)? - y[(i, j)] * xij;
            }
        }
    }
    Ok(total)
}

/// Entry `(i, j)` is `w_ij * (exp(x_ij) - y_ij)`; zero at masked cells.
pub fn data_fit_gradient(table: &CountTable, x: &NaturalParamMatrix) -> Result<DMatrix<f64>> {
    data_fit_gradient_capped(table, x.as_matrix(), DEFAULT_EXP_CAP)
}

pub fn data_fit_gradient_capped(
    table: &CountTable,
    x: &DMatrix<f64>,
    exp_cap: f64,
) -> Result<DMatrix<f64>> {
    check_shapes(table, x)?;
    let (n, p) = x.shape();
    let mask = table.mask();
    let y = table.observed_values();
    let mut grad = DMatrix::zeros(n, p);
    for j in 0..p {
        for i in 0..n {
            if mask[(i, j)] {
                grad[(i, j)] = capped_exp(x[(i, j)], i, j, exp_cap)? - y[(i, j)];
            }
        }
    }
    Ok(grad)
}

/// Data fit plus `lambda` times the nuclear norm of the interaction matrix.
pub fn penalized_objective(
    table: &CountTable,
    params: &ModelParams,
    cov: &CovariateSet,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let x = build_natural_params(params, cov)?;
    let fit = data_fit(table, &x)?;
    let penalty = if lambda == 0.0 {
        0.0
    } else {
        lambda * linalg::nuclear_norm(&params.theta)?
    };
    Ok(fit + penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(rows: usize, cols: usize, data: &[u64]) -> CountTable {
        CountTable::fully_observed(DMatrix::from_row_slice(rows, cols, data)).unwrap()
    }

    #[test]
    fn offset_only_params() {
        let cov = CovariateSet::none(2, 3);
        let mut params = ModelParams::zeros(2, 3, 0, 0);
        params.mu = 1.0;
        let x = build_natural_params(&params, &cov).unwrap();
        assert_eq!(x.0, DMatrix::from_element(2, 3, 1.0));
    }

    #[test]
    fn covariate_effects() {
        let cov = CovariateSet::from_scaled(
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        )
        .unwrap();
        let mut params = ModelParams::zeros(2, 2, 1, 1);
        params.alpha[0] = 1.0;
        params.beta[0] = 1.0;
        let x = build_natural_params(&params, &cov).unwrap();
        assert_eq!(x.0, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 3.0, 1.0]));

        let t = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.25, 0.25]);
        params.theta = t.clone();
        let shifted = build_natural_params(&params, &cov).unwrap();
        assert_eq!(shifted.0, x.0 + t);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cov = CovariateSet::none(2, 2);
        let params = ModelParams::zeros(2, 2, 1, 0);
        assert!(matches!(
            build_natural_params(&params, &cov),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn data_fit_examples() {
        let t = table(1, 1, &[0]);
        assert_eq!(data_fit(&t, &NaturalParamMatrix(DMatrix::zeros(1, 1))).unwrap(), 1.0);

        let t = table(1, 2, &[2, 1]);
        assert_eq!(data_fit(&t, &NaturalParamMatrix(DMatrix::zeros(1, 2))).unwrap(), 2.0);

        // Only the second cell is observed; the masked 5 contributes nothing.
        let masked = CountTable::from_counts(
            DMatrix::from_row_slice(1, 2, &[5, 0]),
            DMatrix::from_row_slice(1, 2, &[false, true]),
        )
        .unwrap();
        let x = NaturalParamMatrix(DMatrix::from_row_slice(1, 2, &[3.7, 0.0]));
        assert_eq!(data_fit(&masked, &x).unwrap(), 1.0);
    }

    #[test]
    fn exp_cap_is_enforced() {
        let t = table(1, 2, &[1, 1]);
        let x = NaturalParamMatrix(DMatrix::from_row_slice(1, 2, &[0.0, 31.0]));
        assert!(matches!(data_fit(&t, &x), Err(Error::NumericRange { col: 1, .. })));
        assert!(matches!(data_fit_gradient(&t, &x), Err(Error::NumericRange { .. })));
    }

    #[test]
    fn gradient_examples() {
        let t = table(2, 2, &[1, 4, 2, 7]);
        let x = NaturalParamMatrix(t.observed_values().map(f64::ln));
        assert!(data_fit_gradient(&t, &x).unwrap().amax() < 1e-12);

        let t = table(2, 2, &[1, 3, 3, 1]);
        let x = NaturalParamMatrix(DMatrix::from_element(2, 2, 2f64.ln()));
        let g = data_fit_gradient(&t, &x).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!((g - expect).amax() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let counts = DMatrix::from_fn(5, 4, |_, _| rng.random_range(0..12u64));
            let mask = DMatrix::from_fn(5, 4, |_, _| rng.random_bool(0.8));
            let Ok(t) = CountTable::from_counts(counts, mask) else { continue };
            let x = DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..2.0));
            let g = data_fit_gradient(&t, &NaturalParamMatrix(x.clone())).unwrap();
            let h = 1e-5;
            for j in 0..4 {
                for i in 0..5 {
                    let mut plus = x.clone();
                    plus[(i, j)] += h;
                    let mut minus = x.clone();
                    minus[(i, j)] -= h;
                    let fd = (data_fit(&t, &NaturalParamMatrix(plus)).unwrap()
                        - data_fit(&t, &NaturalParamMatrix(minus)).unwrap())
                        / (2.0 * h);
                    let err = (fd - g[(i, j)]).abs() / g[(i, j)].abs().max(1.0);
                    assert!(err <= 1e-6, "cell ({i},{j}): fd {fd} vs {}", g[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn penalized_objective_examples() {
        let t = table(2, 2, &[1, 2, 3, 4]);
        let cov = CovariateSet::none(2, 2);
        let mut params = ModelParams::zeros(2, 2, 0, 0);
        params.mu = 0.3;
        let base = data_fit(&t, &build_natural_params(&params, &cov).unwrap()).unwrap();
        assert_eq!(penalized_objective(&t, &params, &cov, 0.0).unwrap(), base);
        assert_eq!(penalized_objective(&t, &params, &cov, 5.0).unwrap(), base);

        params.theta = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let fit = data_fit(&t, &build_natural_params(&params, &cov).unwrap()).unwrap();
        let obj = penalized_objective(&t, &params, &cov, 2.0).unwrap();
        assert!((obj - (fit + 8.0)).abs() < 1e-10);
        assert!(penalized_objective(&t, &params, &cov, -1.0).is_err());
    }

    #[test]
    fn standardization_uses_sample_sd() {
        let cov = CovariateSet::standardize(
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            vec!["a".into()],
            DMatrix::zeros(2, 0),
            vec![],
        )
        .unwrap();
        assert_eq!(cov.row().as_slice(), &[-1.0, 0.0, 1.0]);
        assert_eq!(cov.row_scaling()[0].mean, 2.0);
        assert_eq!(cov.row_scaling()[0].scale, 1.0);

        let constant = CovariateSet::standardize(
            DMatrix::from_element(3, 1, 4.0),
            vec!["flat".into()],
            DMatrix::zeros(2, 0),
            vec![],
        );
        assert!(matches!(constant, Err(Error::Invalid(msg)) if msg.contains("flat")));
    }

    #[test]
    fn original_scale_coefficients_reproduce_predictor() {
        let raw_row = DMatrix::from_column_slice(4, 1, &[1.0, 5.0, 2.0, 8.0]);
        let raw_col = DMatrix::from_column_slice(3, 1, &[10.0, 20.0, 60.0]);
        let cov = CovariateSet::standardize(
            raw_row.clone(),
            vec!["r".into()],
            raw_col.clone(),
            vec!["c".into()],
        )
        .unwrap();
        let mut params = ModelParams::zeros(4, 3, 1, 1);
        params.mu = 0.7;
        params.alpha[0] = 0.4;
        params.beta[0] = -0.9;
        let x = main_effects(params.mu, &params.alpha, &params.beta, &cov).unwrap();
        let (mu, a, b) = cov.to_original_scale(&params);
        let raw = CovariateSet::from_scaled(raw_row, raw_col).unwrap();
        let x_raw = main_effects(mu, &a, &b, &raw).unwrap();
        assert!((x - x_raw).amax() < 1e-12);
    }

    #[test]
    fn objective_is_convex_along_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t = CountTable::fully_observed(DMatrix::from_fn(4, 3, |_, _| rng.random_range(0..9u64))).unwrap();
        let cov = CovariateSet::from_scaled(
            DMatrix::from_fn(4, 1, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let draw = |rng: &mut ChaCha8Rng| ModelParams {
            mu: rng.random_range(-1.0..1.0),
            alpha: DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0)),
            beta: DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0)),
            theta: DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)),
        };
        for _ in 0..50 {
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let mid = ModelParams {
                mu: 0.5 * (a.mu + b.mu),
                alpha: (&a.alpha + &b.alpha) * 0.5,
                beta: (&a.beta + &b.beta) * 0.5,
                theta: (&a.theta + &b.theta) * 0.5,
            };
            let f = |m: &ModelParams| penalized_objective(&t, m, &cov, 0.7).unwrap();
            assert!(f(&mid) <= 0.5 * (f(&a) + f(&b)) + 1e-10);
        }
    }

    proptest! {
        #[test]
        fn masked_cells_never_matter(
            observed in proptest::collection::vec(0u64..50, 6),
            junk in proptest::collection::vec(0u64..1_000_000, 6),
            mask_bits in proptest::collection::vec(any::<bool>(), 6),
            x in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            prop_assume!(mask_bits.iter().any(|&b| b));
            let mask = DMatrix::from_row_slice(2, 3, &mask_bits);
            let a = DMatrix::from_row_slice(2, 3, &observed);
            let b = DMatrix::from_fn(2, 3, |i, j| if mask[(i, j)] { a[(i, j)] } else { junk[i * 3 + j] });
            let ta = CountTable::from_counts(a, mask.clone()).unwrap();
            let tb = CountTable::from_counts(b, mask).unwrap();
            let x = NaturalParamMatrix(DMatrix::from_row_slice(2, 3, &x));
            prop_assert_eq!(data_fit(&ta, &x).unwrap(), data_fit(&tb, &x).unwrap());
            prop_assert_eq!(data_fit_gradient(&ta, &x).unwrap(), data_fit_gradient(&tb, &x).unwrap());
        }
    }
}
