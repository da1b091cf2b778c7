//! Choice of the penalty level: the smallest penalty that zeroes the
//! interaction, its bootstrap null distribution, the resulting independence
//! test, and cross-validation on erased cells.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, CountTable, CovariateSet, ModelParams};
use crate::par::{map_indexed, stream_rng};
use crate::solver::{self, SolverConfig};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_BOOTSTRAP: usize = 100;
pub const MIN_BOOTSTRAP: usize = 20;
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_ERASE_FRACTION: f64 = 0.2;
/// Largest share of bootstrap replicates allowed to fail.
pub const MAX_FAILED_SHARE: f64 = 0.1;
const FOLD_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Qut,
    Cv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub heldout_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub method: SelectionMethod,
    pub chosen_lambda: f64,
    /// Null-thresholding statistic of the data itself.
    pub lambda0: f64,
    /// Statistics of the successful bootstrap replicates, in replicate order.
    pub bootstrap_stats: Option<Vec<f64>>,
    pub failed_replicates: usize,
    pub cv_grid: Option<Vec<CvPoint>>,
    pub epsilon: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub reject: bool,
    pub lambda0: f64,
    pub threshold: f64,
    pub report: SelectionReport,
}

/// Main-effects-only Poisson fit with the interaction pinned at zero.
pub fn fit_null_model(table: &CountTable, cov: &CovariateSet, config: &SolverConfig) -> Result<ModelParams> {
    config.validate()?;
    solver::main_effects_fit(table, cov, config)
}

/// Operator norm of the doubly centered data-fit gradient at `params`.
pub fn threshold_at(table: &CountTable, cov: &CovariateSet, params: &ModelParams, config: &SolverConfig) -> Result<f64> {
    let x = model::build_natural_params(params, cov)?;
    let grad = model::data_fit_gradient_capped(table, x.as_matrix(), config.exp_cap)?;
    linalg::operator_norm(&linalg::interaction_projector(&grad)?)
}

/// Smallest penalty at which the fitted interaction matrix is exactly zero.
pub fn null_threshold_stat(table: &CountTable, cov: &CovariateSet, config: &SolverConfig) -> Result<f64> {
    let null = fit_null_model(table, cov, config)?;
    threshold_at(table, cov, &null, config)
}

/// Order statistic `ceil((1 - epsilon) * m)` (1-based) of `stats`.
pub fn upper_quantile(stats: &[f64], epsilon: f64) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::Invalid("no statistics to take a quantile of".into()));
    }
    if stats.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("bootstrap statistics"));
    }
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    // The small slack keeps e.g. 0.95 * 100 from rounding up to 96.
    let k = (((1.0 - epsilon) * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    Ok(sorted[k - 1])
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    Ok(())
}

/// Draws a table with independent Poisson counts at `means` on the observed
/// cells of `template`; masked cells hold zero.
fn draw_replicate(template: &CountTable, means: &DMatrix<f64>, seed: u64, index: u64) -> Result<CountTable> {
    let mut rng = stream_rng(seed, index);
    let (n, p) = template.shape();
    let mut counts = DMatrix::<u64>::zeros(n, p);
    for j in 0..p {
        for i in 0..n {
            if template.is_observed(i, j) {
                let dist = Poisson::new(means[(i, j)])
                    .map_err(|e| Error::Invalid(format!("poisson mean {}: {e}", means[(i, j)])))?;
                counts[(i, j)] = dist.sample(&mut rng) as u64;
            }
        }
    }
    template.with_counts(counts)
}

/// Quantile universal threshold: the upper `epsilon` quantile of the
/// null-thresholding statistic over `n_boot` parametric bootstrap tables
/// drawn from the main-effects fit, on the observed mask of `table`.
pub fn qut_select(
    table: &CountTable,
    cov: &CovariateSet,
    config: &SolverConfig,
    epsilon: f64,
    n_boot: usize,
    seed: u64,
) -> Result<SelectionReport> {
    check_epsilon(epsilon)?;
    if n_boot < MIN_BOOTSTRAP {
        return Err(Error::Invalid(format!(
            "at least {MIN_BOOTSTRAP} bootstrap replicates are required, got {n_boot}"
        )));
    }
    let null = fit_null_model(table, cov, config)?;
    let lambda0 = threshold_at(table, cov, &null, config)?;
    let means = model::build_natural_params(&null, cov)?.means();

    let outcomes = map_indexed(n_boot, config.parallel, |b| {
        let rep = draw_replicate(table, &means, seed, b as u64)?;
        null_threshold_stat(&rep, cov, config)
    });
    let mut stats = Vec::with_capacity(n_boot);
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(s) => stats.push(s),
            Err(e) => failures.push(e),
        }
    }
    if failures.len() as f64 > MAX_FAILED_SHARE * n_boot as f64 {
        return Err(Error::BootstrapFailure {
            failed: failures.len(),
            total: n_boot,
            first: failures[0].to_string(),
        });
    }
    let chosen = upper_quantile(&stats, epsilon)?;
    if !(chosen > 0.0) {
        return Err(Error::Invalid(
            "bootstrap threshold is zero; the table has no interaction directions".into(),
        ));
    }
    Ok(SelectionReport {
        method: SelectionMethod::Qut,
        chosen_lambda: chosen,
        lambda0,
        bootstrap_stats: Some(stats),
        failed_replicates: failures.len(),
        cv_grid: None,
        epsilon: Some(epsilon),
        seed,
    })
}

/// Rejects independence (zero interaction) when the statistic of the data
/// exceeds its bootstrap threshold.
pub fn independence_test(
    table: &CountTable,
    cov: &CovariateSet,
    config: &SolverConfig,
    epsilon: f64,
    n_boot: usize,
    seed: u64,
) -> Result<TestOutcome> {
    let report = qut_select(table, cov, config, epsilon, n_boot, seed)?;
    Ok(TestOutcome {
        reject: report.lambda0 > report.chosen_lambda,
        lambda0: report.lambda0,
        threshold: report.chosen_lambda,
        report,
    })
}

/// `count` penalties spaced geometrically from `lambda0` down to
/// `lambda0 * ratio`.
pub fn geometric_grid(lambda0: f64, ratio: f64, count: usize) -> Result<Vec<f64>> {
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(Error::Invalid(format!("grid top must be positive, got {lambda0}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) || count < 2 {
        return Err(Error::Invalid(format!(
            "grid needs a ratio in (0, 1) and at least two points, got {ratio} and {count}"
        )));
    }
    let step = ratio.ln() / (count - 1) as f64;
    Ok((0..count).map(|k| lambda0 * (step * k as f64).exp()).collect())
}

/// Erases a random `fraction` of the observed cells, keeping at least one
/// observed cell per row and column. Returns the reduced table and the
/// erased cells.
fn erase_cells(
    table: &CountTable,
    fraction: f64,
    seed: u64,
    index: u64,
) -> Result<(CountTable, Vec<(usize, usize)>)> {
    let observed: Vec<(usize, usize)> = table.observed_cells().map(|(i, j, _)| (i, j)).collect();
    let k = ((fraction * observed.len() as f64).round() as usize).max(1);
    if k >= observed.len() {
        return Err(Error::FoldConstruction(format!(
            "erasing {k} of {} observed cells leaves nothing to fit",
            observed.len()
        )));
    }
    let mut rng = stream_rng(seed, index);
    for _ in 0..FOLD_ATTEMPTS {
        let mut picked: Vec<usize> = sample(&mut rng, observed.len(), k).into_vec();
        picked.sort_unstable();
        let mut mask = table.mask().clone();
        let erased: Vec<(usize, usize)> = picked.iter().map(|&c| observed[c]).collect();
        for &(i, j) in &erased {
            mask[(i, j)] = false;
        }
        let rows_ok = mask.row_iter().all(|r| r.iter().any(|&m| m));
        let cols_ok = mask.column_iter().all(|c| c.iter().any(|&m| m));
        if rows_ok && cols_ok {
            return Ok((table.with_mask(mask)?, erased));
        }
    }
    Err(Error::FoldConstruction(format!(
        "no split in {FOLD_ATTEMPTS} draws kept every row and column observed"
    )))
}

/// Mean squared error of the fitted means over the erased cells.
fn heldout_error(table: &CountTable, cov: &CovariateSet, params: &ModelParams, cells: &[(usize, usize)]) -> Result<f64> {
    let x = model::build_natural_params(params, cov)?;
    let m = x.as_matrix();
    let total: f64 = cells
        .iter()
        .map(|&(i, j)| {
            let d = m[(i, j)].exp() - table.stored_count(i, j) as f64;
            d * d
        })
        .sum();
    Ok(total / cells.len() as f64)
}

/// Cross-validation over erased observed cells. Each fold erases a fresh
/// random `erase_fraction` of the observed cells, fits the whole grid with
/// warm starts and scores squared error on the erased cells. The penalty with
/// the smallest mean error wins; ties go to the larger penalty.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    table: &CountTable,
    cov: &CovariateSet,
    lambdas: &[f64],
    erase_fraction: f64,
    n_folds: usize,
    config: &SolverConfig,
    seed: u64,
) -> Result<SelectionReport> {
    config.validate()?;
    if !(erase_fraction > 0.0 && erase_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "erase fraction must lie in (0, 1), got {erase_fraction}"
        )));
    }
    if n_folds == 0 {
        return Err(Error::Invalid("at least one fold is required".into()));
    }
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::Invalid("penalty grid must be non-empty and positive".into()));
    }
    table.require_full_coverage()?;
    let mut grid = lambdas.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let lambda0 = null_threshold_stat(table, cov, config)?;
    let folds = map_indexed(n_folds, config.parallel, |f| -> Result<Vec<f64>> {
        let (train, erased) = erase_cells(table, erase_fraction, seed, f as u64)?;
        let path = solver::fit_path(&train, cov, &grid, config)?;
        path.iter()
            .map(|res| heldout_error(table, cov, &res.params, &erased))
            .collect()
    });
    let mut totals = vec![0.0; grid.len()];
    for fold in folds {
        for (t, e) in totals.iter_mut().zip(fold?) {
            *t += e;
        }
    }
    let points: Vec<CvPoint> = grid
        .iter()
        .zip(&totals)
        .map(|(&lambda, &t)| CvPoint {
            lambda,
            heldout_error: t / n_folds as f64,
        })
        .collect();
    if points.iter().any(|p| !p.heldout_error.is_finite()) {
        return Err(Error::NonFinite("held-out error"));
    }
    let mut best = &points[0];
    for p in &points[1..] {
        if p.heldout_error < best.heldout_error {
            best = p;
        }
    }
    Ok(SelectionReport {
        method: SelectionMethod::Cv,
        chosen_lambda: best.lambda,
        lambda0,
        bootstrap_stats: None,
        failed_replicates: 0,
        cv_grid: Some(points),
        epsilon: None,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::nuclear_norm;
    use crate::solver::fit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(rows: usize, cols: usize, data: &[u64]) -> CountTable {
        CountTable::fully_observed(DMatrix::from_row_slice(rows, cols, data)).unwrap()
    }

    #[test]
    fn constant_table_null_fit() {
        let t = table(2, 3, &[4, 4, 4, 4, 4, 4]);
        let cov = CovariateSet::none(2, 3);
        let null = fit_null_model(&t, &cov, &SolverConfig::default()).unwrap();
        assert!((null.mu - 4f64.ln()).abs() < 1e-12);
        assert!(null_threshold_stat(&t, &cov, &SolverConfig::default()).unwrap() < 1e-12);
    }

    #[test]
    fn two_by_two_statistic() {
        let t = table(2, 2, &[1, 3, 3, 1]);
        let cov = CovariateSet::none(2, 2);
        let lam0 = null_threshold_stat(&t, &cov, &SolverConfig::default()).unwrap();
        assert!((lam0 - 2.0).abs() < 1e-10, "{lam0}");
    }

    #[test]
    fn null_fit_matches_infinite_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts = DMatrix::from_fn(6, 4, |_, _| rng.random_range(1..30u64));
        let t = CountTable::fully_observed(counts).unwrap();
        let row = DMatrix::from_fn(6, 1, |_, _| rng.random_range(-1.0..1.0));
        let col = DMatrix::from_fn(4, 1, |_, _| rng.random_range(-1.0..1.0));
        let cov = CovariateSet::from_scaled(row, col).unwrap();
        let config = SolverConfig::default();
        let null = fit_null_model(&t, &cov, &config).unwrap();
        let big = fit(&t, &cov, 1e9, &config, None).unwrap();
        assert_eq!(big.params.theta.amax(), 0.0);
        assert!((big.params.mu - null.mu).abs() < 1e-8);
        assert!((&big.params.alpha - &null.alpha).amax() < 1e-8);
        assert!((&big.params.beta - &null.beta).amax() < 1e-8);
    }

    #[test]
    fn quantile_convention() {
        let stats: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(upper_quantile(&stats, 0.05).unwrap(), 95.0);
        assert_eq!(upper_quantile(&stats, 0.999).unwrap(), 1.0);
        let mut shuffled = stats.clone();
        shuffled.reverse();
        assert_eq!(upper_quantile(&shuffled, 0.1).unwrap(), 90.0);
    }

    #[test]
    fn qut_is_deterministic_and_parallel_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let counts = DMatrix::from_fn(8, 5, |_, _| rng.random_range(0..15u64));
        let t = CountTable::fully_observed(counts).unwrap();
        let cov = CovariateSet::none(8, 5);
        let seq = SolverConfig {
            parallel: false,
            ..SolverConfig::default()
        };
        let a = qut_select(&t, &cov, &SolverConfig::default(), 0.05, 30, 11).unwrap();
        let b = qut_select(&t, &cov, &SolverConfig::default(), 0.05, 30, 11).unwrap();
        let c = qut_select(&t, &cov, &seq, 0.05, 30, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.bootstrap_stats.as_ref().unwrap().len(), 30);
        let min = a.bootstrap_stats.unwrap().into_iter().fold(f64::INFINITY, f64::min);
        let loose = qut_select(&t, &cov, &seq, 0.99, 30, 11).unwrap();
        assert_eq!(loose.chosen_lambda, min);
    }

    #[test]
    fn qut_rejects_bad_arguments() {
        let t = table(2, 2, &[1, 3, 3, 1]);
        let cov = CovariateSet::none(2, 2);
        let config = SolverConfig::default();
        assert!(qut_select(&t, &cov, &config, 0.0, 100, 1).is_err());
        assert!(qut_select(&t, &cov, &config, 0.05, 10, 1).is_err());
    }

    #[test]
    fn cv_single_lambda_is_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let counts = DMatrix::from_fn(8, 6, |_, _| rng.random_range(1..20u64));
        let t = CountTable::fully_observed(counts).unwrap();
        let cov = CovariateSet::none(8, 6);
        let report = cross_validate(&t, &cov, &[3.0], 0.2, 3, &SolverConfig::default(), 4).unwrap();
        assert_eq!(report.chosen_lambda, 3.0);
        assert!(report.cv_grid.unwrap()[0].heldout_error.is_finite());
    }

    #[test]
    fn cv_prefers_small_penalty_on_strong_interaction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, p) = (15, 8);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta = linalg::interaction_projector(&DMatrix::from_fn(n, p, |i, j| 2.0 * u[i] * v[j])).unwrap();
        let counts = DMatrix::from_fn(n, p, |i, j| {
            Poisson::new((2.5 + theta[(i, j)]).exp()).unwrap().sample(&mut rng) as u64
        });
        let t = CountTable::fully_observed(counts).unwrap();
        let cov = CovariateSet::none(n, p);
        let config = SolverConfig::default();
        let lam0 = null_threshold_stat(&t, &cov, &config).unwrap();
        let grid = [lam0 * 1.01, lam0 / 10.0];
        let report = cross_validate(&t, &cov, &grid, 0.2, 5, &config, 3).unwrap();
        assert_eq!(report.chosen_lambda, lam0 / 10.0);
        let big = fit(&t, &cov, lam0 / 10.0, &config, None).unwrap();
        assert!(nuclear_norm(&big.params.theta).unwrap() > 0.0);
    }

    #[test]
    fn cv_ties_prefer_larger_penalty() {
        // Both penalties exceed the statistic of every fold, so every fit is
        // the null model and the errors tie exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let counts = DMatrix::from_fn(6, 5, |_, _| rng.random_range(1..10u64));
        let t = CountTable::fully_observed(counts).unwrap();
        let cov = CovariateSet::none(6, 5);
        let report = cross_validate(&t, &cov, &[1e6, 2e6], 0.2, 2, &SolverConfig::default(), 1).unwrap();
        assert_eq!(report.chosen_lambda, 2e6);
    }

    #[test]
    fn fold_construction_fails_on_sparse_rows() {
        let t = table(3, 1, &[1, 2, 3]);
        let cov = CovariateSet::none(3, 1);
        let err = cross_validate(&t, &cov, &[1.0], 0.5, 1, &SolverConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::FoldConstruction(_)), "{err}");
    }

    #[test]
    fn geometric_grid_endpoints() {
        let g = geometric_grid(10.0, 0.01, 5).unwrap();
        assert_eq!(g.len(), 5);
        assert!((g[0] - 10.0).abs() < 1e-12 && (g[4] - 0.1).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }
}
