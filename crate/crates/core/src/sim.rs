//! Synthetic tables drawn from the model, MCAR masking, the column-mean
//! baseline, and the estimation and imputation benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, default_names, CountTable, CovariateSet, ModelParams, DEFAULT_EXP_CAP};
use crate::par::{map_indexed, stream_rng};
use crate::select::{self, DEFAULT_BOOTSTRAP, DEFAULT_EPSILON};
use crate::solver::{self, FitResult, SolverConfig};

const MASK_ATTEMPTS: usize = 100;

/// Stream tags keeping the random draws of different purposes apart.
const DESIGN_STREAM: u64 = 0;
const MASK_TAG: u64 = 0x6d61_736b;
const QUT_TAG: u64 = 0x7175_7431;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    pub p: usize,
    pub mu_star: f64,
    /// True row-covariate coefficients; their count is the number of row covariates.
    pub alpha_star: Vec<f64>,
    pub beta_star: Vec<f64>,
    pub theta_rank: usize,
    /// Frobenius norm of the interaction relative to that of the main effects.
    pub tau_ratio: f64,
    pub miss_prob: f64,
    /// Covariates come in consecutive equicorrelated blocks of this size.
    pub block_size: usize,
    pub block_corr: f64,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n: 100,
            p: 20,
            mu_star: 1.0,
            alpha_star: vec![2.0, 0.0, 0.0],
            beta_star: vec![-2.0, 0.0, 0.0, 0.0],
            theta_rank: 5,
            tau_ratio: 0.5,
            miss_prob: 0.0,
            block_size: 2,
            block_corr: 0.5,
            seed: 1,
        }
    }
}

impl SimSpec {
    pub fn k_row(&self) -> usize {
        self.alpha_star.len()
    }

    pub fn k_col(&self) -> usize {
        self.beta_star.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 2 {
            return Err(Error::Invalid(format!("need at least 2x2 cells, got {}x{}", self.n, self.p)));
        }
        if !(0.0..1.0).contains(&self.miss_prob) {
            return Err(Error::Invalid(format!("miss_prob must lie in [0, 1), got {}", self.miss_prob)));
        }
        if !(self.tau_ratio >= 0.0 && self.tau_ratio.is_finite()) {
            return Err(Error::Invalid(format!("tau_ratio must be nonnegative, got {}", self.tau_ratio)));
        }
        let max_rank = (self.n - 1).min(self.p - 1);
        if self.tau_ratio > 0.0 && (self.theta_rank == 0 || self.theta_rank > max_rank) {
            return Err(Error::Invalid(format!(
                "theta_rank must lie in 1..={max_rank}, got {}",
                self.theta_rank
            )));
        }
        if self.block_size == 0 || !(self.block_corr > -1.0 && self.block_corr < 1.0) {
            return Err(Error::Invalid(format!(
                "covariate blocks need a positive size and a correlation in (-1, 1), got {} and {}",
                self.block_size, self.block_corr
            )));
        }
        let finite = std::iter::once(self.mu_star)
            .chain(self.alpha_star.iter().copied())
            .chain(self.beta_star.iter().copied())
            .all(f64::is_finite);
        if !finite {
            return Err(Error::NonFinite("simulation coefficients"));
        }
        Ok(())
    }
}

/// A simulated table with its covariates and the parameters that generated it.
#[derive(Debug, Clone)]
pub struct SimData {
    pub table: CountTable,
    pub cov: CovariateSet,
    pub truth: ModelParams,
    /// True natural parameters.
    pub natural: DMatrix<f64>,
}

/// Gaussian draws with unit variances and correlation `corr` inside
/// consecutive blocks of `block` columns.
fn block_gaussian(rng: &mut ChaCha8Rng, rows: usize, k: usize, block: usize, corr: f64) -> Result<DMatrix<f64>> {
    let sigma = DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            1.0
        } else if a / block == b / block {
            corr
        } else {
            0.0
        }
    });
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Invalid(format!("block correlation {corr} is not positive definite")))?;
    let l = chol.l();
    let z = DMatrix::from_fn(rows, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(z * l.transpose())
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Replicate 0 of `spec`.
pub fn simulate_dataset(spec: &SimSpec) -> Result<SimData> {
    simulate_replicate(spec, 0, DEFAULT_EXP_CAP)
}

/// Replicate `rep` of `spec`. The covariates, and hence the main effects,
/// depend on the seed only; the interaction, the counts and the mask are
/// redrawn for every replicate.
pub fn simulate_replicate(spec: &SimSpec, rep: u64, exp_cap: f64) -> Result<SimData> {
    spec.validate()?;
    let (n, p) = (spec.n, spec.p);
    let mut design = stream_rng(spec.seed, DESIGN_STREAM);
    let raw_row = block_gaussian(&mut design, n, spec.k_row(), spec.block_size, spec.block_corr)?;
    let raw_col = block_gaussian(&mut design, p, spec.k_col(), spec.block_size, spec.block_corr)?;
    let cov = CovariateSet::standardize(
        raw_row,
        default_names("row_cov", spec.k_row()),
        raw_col,
        default_names("col_cov", spec.k_col()),
    )?;
    let alpha = DVector::from_vec(spec.alpha_star.clone());
    let beta = DVector::from_vec(spec.beta_star.clone());
    let main = model::main_effects(spec.mu_star, &alpha, &beta, &cov)?;

    let mut rng = stream_rng(spec.seed, 1 + rep);
    let theta = if spec.tau_ratio == 0.0 {
        DMatrix::zeros(n, p)
    } else {
        let a = gaussian(&mut rng, n, spec.theta_rank);
        let b = gaussian(&mut rng, p, spec.theta_rank);
        let raw = linalg::interaction_projector(&(a * b.transpose()))?;
        let scale = spec.tau_ratio * main.norm() / raw.norm();
        raw * scale
    };
    let natural = &main + &theta;
    for j in 0..p {
        for i in 0..n {
            let v = natural[(i, j)];
            if !(v <= exp_cap) {
                return Err(Error::NumericRange {
                    row: i,
                    col: j,
                    value: v,
                    cap: exp_cap,
                });
            }
        }
    }
    let mut counts = DMatrix::<u64>::zeros(n, p);
    for j in 0..p {
        for i in 0..n {
            let dist = Poisson::new(natural[(i, j)].exp())
                .map_err(|e| Error::Invalid(format!("poisson mean at ({i}, {j}): {e}")))?;
            counts[(i, j)] = dist.sample(&mut rng) as u64;
        }
    }
    let mut table = CountTable::fully_observed(counts)?;
    if spec.miss_prob > 0.0 {
        let mask_seed: u64 = rng.random();
        table = apply_mcar_mask(&table, spec.miss_prob, mask_seed)?;
    }
    let truth = ModelParams {
        mu: spec.mu_star,
        alpha,
        beta,
        theta,
    };
    Ok(SimData {
        table,
        cov,
        truth,
        natural,
    })
}

/// Hides every observed cell independently with probability `miss_prob`,
/// redrawing until each row and column keeps an observed cell.
pub fn apply_mcar_mask(table: &CountTable, miss_prob: f64, seed: u64) -> Result<CountTable> {
    if !(0.0..1.0).contains(&miss_prob) {
        return Err(Error::Invalid(format!("miss_prob must lie in [0, 1), got {miss_prob}")));
    }
    if miss_prob == 0.0 {
        return Ok(table.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = table.mask();
    for _ in 0..MASK_ATTEMPTS {
        let mask = base.map(|m| m && !rng.random_bool(miss_prob));
        let rows_ok = mask.row_iter().all(|r| r.iter().any(|&m| m));
        let cols_ok = mask.column_iter().all(|c| c.iter().any(|&m| m));
        if rows_ok && cols_ok {
            return table.with_mask(mask);
        }
    }
    Err(Error::Invalid(format!(
        "no mask at miss_prob {miss_prob} kept every row and column of a {}x{} table observed in {MASK_ATTEMPTS} draws",
        table.nrows(),
        table.ncols()
    )))
}

/// Nested MCAR masks: one uniform draw per cell hides it at every fraction
/// above the draw, so the hidden set at each fraction contains the hidden
/// sets of all smaller fractions. Redrawn until every row and column keeps an
/// observed cell at the largest fraction.
pub fn nested_mcar_masks(table: &CountTable, miss_fracs: &[f64], seed: u64) -> Result<Vec<CountTable>> {
    if let Some(bad) = miss_fracs.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::Invalid(format!("missing fractions must lie in [0, 1), got {bad}")));
    }
    let top = miss_fracs.iter().copied().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = table.mask();
    for _ in 0..MASK_ATTEMPTS {
        let draws = base.map(|_| rng.random::<f64>());
        let hide = |f: f64| base.zip_map(&draws, |m, u| m && u >= f);
        let widest = hide(top);
        let rows_ok = widest.row_iter().all(|r| r.iter().any(|&m| m));
        let cols_ok = widest.column_iter().all(|c| c.iter().any(|&m| m));
        if rows_ok && cols_ok {
            return miss_fracs.iter().map(|&f| table.with_mask(hide(f))).collect();
        }
    }
    Err(Error::Invalid(format!(
        "no nested masks up to fraction {top} kept every row and column of a {}x{} table observed in {MASK_ATTEMPTS} draws",
        table.nrows(),
        table.ncols()
    )))
}

/// Observed counts, with each masked cell replaced by the mean of the
/// observed cells of its column.
pub fn baseline_column_mean(table: &CountTable) -> Result<DMatrix<f64>> {
    let (n, p) = table.shape();
    let mut out = DMatrix::zeros(n, p);
    for j in 0..p {
        let observed: Vec<f64> = (0..n).filter_map(|i| table.count(i, j)).map(|y| y as f64).collect();
        if observed.is_empty() {
            return Err(Error::Invalid(format!("column '{}' has no observed cell", table.col_names()[j])));
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        for i in 0..n {
            out[(i, j)] = table.count(i, j).map_or(mean, |y| y as f64);
        }
    }
    Ok(out)
}

/// Settings shared by the benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub solver: SolverConfig,
    pub epsilon: f64,
    pub n_boot: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            epsilon: DEFAULT_EPSILON,
            n_boot: DEFAULT_BOOTSTRAP,
        }
    }
}

fn derived_seed(seed: u64, tag: u64, index: u64) -> u64 {
    stream_rng(seed ^ tag, index).random()
}

/// Per-fit health checks recorded by the benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub monotone: bool,
    pub centering_residual: f64,
    pub effective_rank: usize,
}

impl FitDiagnostics {
    pub fn of(fit: &FitResult) -> Self {
        Self {
            lambda: fit.lambda,
            iterations: fit.n_iters,
            converged: fit.converged,
            monotone: fit.trace_nonincreasing(1e-10),
            centering_residual: linalg::centering_residual(&fit.params.theta),
            effective_rank: fit.effective_rank,
        }
    }
}

/// Penalty chosen by the bootstrap quantile, then the fit at that penalty.
fn qut_fit(table: &CountTable, cov: &CovariateSet, bench: &BenchConfig, seed: u64) -> Result<FitResult> {
    let report = select::qut_select(table, cov, &bench.solver, bench.epsilon, bench.n_boot, seed)?;
    solver::fit(table, cov, report.chosen_lambda, &bench.solver, None)
}

fn coefficient_rmse(est: &ModelParams, truth: &ModelParams) -> f64 {
    ((&est.alpha - &truth.alpha).norm_squared() + (&est.beta - &truth.beta).norm_squared()).sqrt()
}

fn relative_error(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (est - truth).norm() / truth.norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Low-rank interaction with covariates at the bootstrap penalty.
    Lowrank,
    /// Main effects only.
    Glm,
    /// Low-rank interaction without covariates at its own bootstrap penalty.
    Lrm,
    /// Column means of the observed cells.
    Colmean,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Lowrank => "lowrank",
            Method::Glm => "glm",
            Method::Lrm => "lrm",
            Method::Colmean => "colmean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRecord {
    pub tau: f64,
    pub rep: usize,
    pub method: Method,
    pub coef_rmse: Option<f64>,
    pub relative_error: Option<f64>,
    pub diagnostics: Option<FitDiagnostics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationSummary {
    pub tau: f64,
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_coef_rmse: Option<f64>,
    pub sd_coef_rmse: Option<f64>,
    pub mean_relative_error: Option<f64>,
    pub sd_relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub spec: SimSpec,
    pub taus: Vec<f64>,
    pub reps: usize,
    pub config: BenchConfig,
    pub summary: Vec<EstimationSummary>,
    pub records: Vec<EstimationRecord>,
}

impl EstimationReport {
    pub fn summary_for(&self, tau: f64, method: Method) -> Option<&EstimationSummary> {
        self.summary.iter().find(|s| s.tau == tau && s.method == method)
    }
}

pub fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    (Some(mean), sd)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    Some(if m % 2 == 1 { v[m / 2] } else { (v[m / 2 - 1] + v[m / 2]) / 2.0 })
}

fn failed(tau: f64, rep: usize, method: Method, err: &Error) -> EstimationRecord {
    EstimationRecord {
        tau,
        rep,
        method,
        coef_rmse: None,
        relative_error: None,
        diagnostics: None,
        error: Some(err.to_string()),
    }
}

fn estimation_task(spec: &SimSpec, rep: usize, bench: &BenchConfig) -> Vec<EstimationRecord> {
    let tau = spec.tau_ratio;
    let data = match simulate_replicate(spec, rep as u64, bench.solver.exp_cap) {
        Ok(d) => d,
        Err(e) => {
            return [Method::Lowrank, Method::Glm, Method::Lrm]
                .into_iter()
                .map(|m| failed(tau, rep, m, &e))
                .collect()
        }
    };
    let qut_seed = derived_seed(spec.seed, QUT_TAG, rep as u64);
    let mut out = Vec::with_capacity(3);

    out.push(match qut_fit(&data.table, &data.cov, bench, qut_seed) {
        Ok(fit) => natural_record(tau, rep, Method::Lowrank, &fit.params, &data, Some(&fit)),
        Err(e) => Err(e),
    }
    .unwrap_or_else(|e| failed(tau, rep, Method::Lowrank, &e)));

    out.push(
        solver::main_effects_fit(&data.table, &data.cov, &bench.solver)
            .and_then(|params| natural_record(tau, rep, Method::Glm, &params, &data, None))
            .unwrap_or_else(|e| failed(tau, rep, Method::Glm, &e)),
    );

    let bare = CovariateSet::none(spec.n, spec.p);
    out.push(
        qut_fit(&data.table, &bare, bench, qut_seed)
            .and_then(|fit| {
                let x = model::build_natural_params(&fit.params, &bare)?.into_inner();
                Ok(EstimationRecord {
                    tau,
                    rep,
                    method: Method::Lrm,
                    coef_rmse: None,
                    relative_error: Some(relative_error(&x, &data.natural)),
                    diagnostics: Some(FitDiagnostics::of(&fit)),
                    error: None,
                })
            })
            .unwrap_or_else(|e| failed(tau, rep, Method::Lrm, &e)),
    );
    out
}

fn natural_record(
    tau: f64,
    rep: usize,
    method: Method,
    params: &ModelParams,
    data: &SimData,
    fit: Option<&FitResult>,
) -> Result<EstimationRecord> {
    let x = model::build_natural_params(params, &data.cov)?.into_inner();
    Ok(EstimationRecord {
        tau,
        rep,
        method,
        coef_rmse: Some(coefficient_rmse(params, &data.truth)),
        relative_error: Some(relative_error(&x, &data.natural)),
        diagnostics: fit.map(FitDiagnostics::of),
        error: None,
    })
}

/// Coefficient and natural-parameter errors of the low-rank fit, the
/// main-effects fit and the covariate-free low-rank fit, over `reps`
/// replicates at every interaction strength in `taus`.
pub fn run_estimation_benchmark(base: &SimSpec, taus: &[f64], reps: usize, bench: &BenchConfig) -> Result<EstimationReport> {
    if reps == 0 || taus.is_empty() {
        return Err(Error::Invalid("benchmark needs at least one replicate and one tau".into()));
    }
    bench.solver.validate()?;
    for &tau in taus {
        SimSpec {
            tau_ratio: tau,
            ..base.clone()
        }
        .validate()?;
    }
    let tasks = map_indexed(taus.len() * reps, bench.solver.parallel, |k| {
        let spec = SimSpec {
            tau_ratio: taus[k / reps],
            ..base.clone()
        };
        estimation_task(&spec, k % reps, bench)
    });
    let records: Vec<EstimationRecord> = tasks.into_iter().flatten().collect();

    let mut summary = Vec::new();
    for &tau in taus {
        for method in [Method::Lowrank, Method::Glm, Method::Lrm] {
            let rows: Vec<&EstimationRecord> = records
                .iter()
                .filter(|r| r.tau == tau && r.method == method)
                .collect();
            let ok: Vec<&&EstimationRecord> = rows.iter().filter(|r| r.error.is_none()).collect();
            let coef: Vec<f64> = ok.iter().filter_map(|r| r.coef_rmse).collect();
            let rel: Vec<f64> = ok.iter().filter_map(|r| r.relative_error).collect();
            let (mean_coef_rmse, sd_coef_rmse) = mean_sd(&coef);
            let (mean_relative_error, sd_relative_error) = mean_sd(&rel);
            summary.push(EstimationSummary {
                tau,
                method,
                n_ok: ok.len(),
                n_failed: rows.len() - ok.len(),
                mean_coef_rmse,
                sd_coef_rmse,
                mean_relative_error,
                sd_relative_error,
            });
        }
    }
    Ok(EstimationReport {
        spec: base.clone(),
        taus: taus.to_vec(),
        reps,
        config: bench.clone(),
        summary,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationRecord {
    pub miss_frac: f64,
    pub rep: usize,
    pub method: Method,
    /// Mean squared error over the hidden cells.
    pub error: Option<f64>,
    pub diagnostics: Option<FitDiagnostics>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSummary {
    pub miss_frac: f64,
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub median_error: Option<f64>,
    pub mean_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub spec: SimSpec,
    pub miss_fracs: Vec<f64>,
    pub reps: usize,
    pub config: BenchConfig,
    pub summary: Vec<ImputationSummary>,
    /// Median column-mean error minus median low-rank error, per fraction.
    pub median_gap: Vec<Option<f64>>,
    pub records: Vec<ImputationRecord>,
}

impl ImputationReport {
    pub fn summary_for(&self, miss_frac: f64, method: Method) -> Option<&ImputationSummary> {
        self.summary
            .iter()
            .find(|s| s.miss_frac == miss_frac && s.method == method)
    }

    pub fn gap_for(&self, miss_frac: f64) -> Option<f64> {
        let k = self.miss_fracs.iter().position(|&f| f == miss_frac)?;
        self.median_gap[k]
    }
}

fn hidden_error(full: &CountTable, masked: &CountTable, estimate: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, j, y) in full.observed_cells() {
        if !masked.is_observed(i, j) {
            let d = y as f64 - estimate[(i, j)];
            total += d * d;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn imputation_task(spec: &SimSpec, miss_fracs: &[f64], frac_index: usize, rep: usize, bench: &BenchConfig) -> Vec<ImputationRecord> {
    let miss_frac = miss_fracs[frac_index];
    let record = |method: Method, outcome: Result<(f64, Option<FitDiagnostics>)>| match outcome {
        Ok((error, diagnostics)) => ImputationRecord {
            miss_frac,
            rep,
            method,
            error: Some(error),
            diagnostics,
            failure: None,
        },
        Err(e) => ImputationRecord {
            miss_frac,
            rep,
            method,
            error: None,
            diagnostics: None,
            failure: Some(e.to_string()),
        },
    };
    let prepared = (|| -> Result<(SimData, CountTable)> {
        let full_spec = SimSpec {
            miss_prob: 0.0,
            ..spec.clone()
        };
        let data = simulate_replicate(&full_spec, rep as u64, bench.solver.exp_cap)?;
        let mut masks = nested_mcar_masks(&data.table, miss_fracs, derived_seed(spec.seed, MASK_TAG, rep as u64))?;
        let masked = masks.swap_remove(frac_index);
        Ok((data, masked))
    })();
    let (data, masked) = match prepared {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return [Method::Lowrank, Method::Colmean]
                .into_iter()
                .map(|m| record(m, Err(Error::Invalid(msg.clone()))))
                .collect();
        }
    };
    let qut_seed = derived_seed(spec.seed, QUT_TAG, (rep * 1000 + frac_index) as u64);
    let lowrank = qut_fit(&masked, &data.cov, bench, qut_seed).and_then(|fit| {
        let est = crate::analysis::impute(&masked, &fit.params, &data.cov)?;
        Ok((hidden_error(&data.table, &masked, &est), Some(FitDiagnostics::of(&fit))))
    });
    let colmean = baseline_column_mean(&masked).map(|est| (hidden_error(&data.table, &masked, &est), None));
    vec![record(Method::Lowrank, lowrank), record(Method::Colmean, colmean)]
}

/// Hidden-cell imputation error of the low-rank fit and of column means as
/// the share of hidden cells grows. Each replicate simulates a fully
/// observed table and hides nested sets of cells at the fractions in
/// `miss_fracs`; the `miss_prob` of `spec` is not used.
pub fn run_imputation_benchmark(
    spec: &SimSpec,
    miss_fracs: &[f64],
    reps: usize,
    bench: &BenchConfig,
) -> Result<ImputationReport> {
    if reps == 0 || miss_fracs.is_empty() {
        return Err(Error::Invalid("benchmark needs at least one replicate and one fraction".into()));
    }
    if miss_fracs.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
        return Err(Error::Invalid("missing fractions must lie in (0, 1)".into()));
    }
    spec.validate()?;
    bench.solver.validate()?;
    let tasks = map_indexed(miss_fracs.len() * reps, bench.solver.parallel, |k| {
        let f = k / reps;
        imputation_task(spec, miss_fracs, f, k % reps, bench)
    });
    let records: Vec<ImputationRecord> = tasks.into_iter().flatten().collect();

    let mut summary = Vec::new();
    let mut median_gap = Vec::new();
    for &frac in miss_fracs {
        let mut medians = [None, None];
        for (slot, method) in [Method::Lowrank, Method::Colmean].into_iter().enumerate() {
            let rows: Vec<&ImputationRecord> = records
                .iter()
                .filter(|r| r.miss_frac == frac && r.method == method)
                .collect();
            let errors: Vec<f64> = rows.iter().filter_map(|r| r.error).collect();
            medians[slot] = median(&errors);
            summary.push(ImputationSummary {
                miss_frac: frac,
                method,
                n_ok: errors.len(),
                n_failed: rows.len() - errors.len(),
                median_error: medians[slot],
                mean_error: mean_sd(&errors).0,
            });
        }
        median_gap.push(match medians {
            [Some(low), Some(col)] => Some(col - low),
            _ => None,
        });
    }
    Ok(ImputationReport {
        spec: spec.clone(),
        miss_fracs: miss_fracs.to_vec(),
        reps,
        config: bench.clone(),
        summary,
        median_gap,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SimSpec {
        SimSpec {
            n: 30,
            p: 8,
            theta_rank: 2,
            ..SimSpec::default()
        }
    }

    #[test]
    fn zero_tau_gives_zero_theta() {
        let data = simulate_dataset(&SimSpec {
            tau_ratio: 0.0,
            ..small_spec()
        })
        .unwrap();
        assert!(data.truth.theta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn theta_is_centered_with_requested_rank_and_ratio() {
        let spec = small_spec();
        let data = simulate_dataset(&spec).unwrap();
        assert!(linalg::centering_residual(&data.truth.theta) < 1e-10);
        assert_eq!(linalg::effective_rank(&data.truth.theta, 1e-8).unwrap(), 2);
        let main = &data.natural - &data.truth.theta;
        let ratio = data.truth.theta.norm() / main.norm();
        assert!((ratio - spec.tau_ratio).abs() < 1e-12);
        assert!((main.norm() - model::main_effects(1.0, &data.truth.alpha, &data.truth.beta, &data.cov).unwrap().norm()).abs() < 1e-9);
    }

    #[test]
    fn covariates_are_fixed_across_replicates() {
        let spec = small_spec();
        let a = simulate_replicate(&spec, 0, DEFAULT_EXP_CAP).unwrap();
        let b = simulate_replicate(&spec, 1, DEFAULT_EXP_CAP).unwrap();
        assert_eq!(a.cov, b.cov);
        assert_ne!(a.truth.theta, b.truth.theta);
        let c = simulate_replicate(&spec, 1, DEFAULT_EXP_CAP).unwrap();
        assert_eq!(b.table, c.table);
    }

    #[test]
    fn cell_means_match_poisson_rate() {
        // Average of many replicate tables with a fixed interaction.
        let spec = SimSpec {
            n: 6,
            p: 4,
            alpha_star: vec![0.3],
            beta_star: vec![-0.2],
            tau_ratio: 0.0,
            ..SimSpec::default()
        };
        let draws = 2000;
        let first = simulate_replicate(&spec, 0, DEFAULT_EXP_CAP).unwrap();
        let mut sum = DMatrix::<f64>::zeros(6, 4);
        for rep in 0..draws {
            let d = simulate_replicate(&spec, rep, DEFAULT_EXP_CAP).unwrap();
            sum += d.table.stored_counts().map(|c| c as f64);
        }
        for (k, s) in sum.iter().enumerate() {
            let rate = first.natural[k].exp();
            let mean = s / draws as f64;
            assert!((mean - rate).abs() <= 3.0 * (rate / draws as f64).sqrt() + 1e-9, "cell {k}: {mean} vs {rate}");
        }
    }

    #[test]
    fn overflow_is_rejected() {
        let spec = SimSpec {
            mu_star: 40.0,
            ..small_spec()
        };
        assert!(matches!(simulate_dataset(&spec), Err(Error::NumericRange { .. })));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SimSpec { miss_prob: 1.0, ..small_spec() }.validate().is_err());
        assert!(SimSpec { tau_ratio: -0.1, ..small_spec() }.validate().is_err());
        assert!(SimSpec { theta_rank: 8, ..small_spec() }.validate().is_err());
    }

    #[test]
    fn mcar_mask_properties() {
        let table = CountTable::fully_observed(DMatrix::from_fn(40, 25, |i, j| (i + j) as u64)).unwrap();
        assert_eq!(apply_mcar_mask(&table, 0.0, 1).unwrap(), table);
        let a = apply_mcar_mask(&table, 0.3, 7).unwrap();
        let b = apply_mcar_mask(&table, 0.3, 7).unwrap();
        assert_eq!(a, b);
        let cells = 1000.0;
        let missing = cells - a.n_observed() as f64;
        let sd = (cells * 0.3 * 0.7).sqrt();
        assert!((missing - 300.0).abs() <= 3.0 * sd, "{missing}");
        a.require_full_coverage().unwrap();
        let tiny = CountTable::fully_observed(DMatrix::from_element(1, 3, 1u64)).unwrap();
        assert!(apply_mcar_mask(&tiny, 0.99, 3).is_err());
    }

    #[test]
    fn nested_masks_grow() {
        let table = CountTable::fully_observed(DMatrix::from_fn(40, 25, |i, j| (i * j) as u64)).unwrap();
        let fracs = [0.2, 0.6, 0.4];
        let masks = nested_mcar_masks(&table, &fracs, 5).unwrap();
        assert_eq!(masks, nested_mcar_masks(&table, &fracs, 5).unwrap());
        let hidden = |t: &CountTable| t.mask().map(|m| !m);
        let (low, mid, high) = (hidden(&masks[0]), hidden(&masks[2]), hidden(&masks[1]));
        assert!(low.zip_map(&mid, |a, b| !a || b).iter().all(|&x| x));
        assert!(mid.zip_map(&high, |a, b| !a || b).iter().all(|&x| x));
        for (m, f) in masks.iter().zip(fracs) {
            let missing = 1000.0 - m.n_observed() as f64;
            let sd = (1000.0 * f * (1.0 - f)).sqrt();
            assert!((missing - 1000.0 * f).abs() <= 3.0 * sd, "{missing} at {f}");
            m.require_full_coverage().unwrap();
        }
        assert!(nested_mcar_masks(&table, &[1.0], 5).is_err());
    }

    #[test]
    fn column_mean_baseline() {
        let table = CountTable::from_counts(
            DMatrix::from_row_slice(3, 2, &[2, 5, 9, 6, 4, 7]),
            DMatrix::from_row_slice(3, 2, &[true, true, false, true, true, true]),
        )
        .unwrap();
        let out = baseline_column_mean(&table).unwrap();
        assert_eq!(out, DMatrix::from_row_slice(3, 2, &[2.0, 5.0, 3.0, 6.0, 4.0, 7.0]));
    }

    #[test]
    fn column_mean_matches_formula() {
        let data = simulate_dataset(&SimSpec {
            miss_prob: 0.4,
            ..small_spec()
        })
        .unwrap();
        let out = baseline_column_mean(&data.table).unwrap();
        for j in 0..data.table.ncols() {
            let (mut s, mut c) = (0.0, 0.0);
            for i in 0..data.table.nrows() {
                if data.table.is_observed(i, j) {
                    s += data.table.stored_count(i, j) as f64;
                    c += 1.0;
                }
            }
            for i in 0..data.table.nrows() {
                let want = if data.table.is_observed(i, j) { data.table.stored_count(i, j) as f64 } else { s / c };
                assert_eq!(out[(i, j)], want);
            }
        }
    }

    #[test]
    fn small_benchmarks_are_reproducible() {
        let spec = SimSpec {
            n: 20,
            p: 6,
            theta_rank: 2,
            alpha_star: vec![1.0],
            beta_star: vec![-1.0],
            ..SimSpec::default()
        };
        let bench = BenchConfig {
            n_boot: 20,
            ..BenchConfig::default()
        };
        let a = run_estimation_benchmark(&spec, &[0.0, 0.5], 2, &bench).unwrap();
        let b = run_estimation_benchmark(&spec, &[0.0, 0.5], 2, &bench).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 12);
        assert!(a.records.iter().all(|r| r.error.is_none()));
        let imp = run_imputation_benchmark(&spec, &[0.2, 0.4], 2, &bench).unwrap();
        assert_eq!(imp, run_imputation_benchmark(&spec, &[0.2, 0.4], 2, &bench).unwrap());
        assert_eq!(imp.median_gap.len(), 2);
    }

    #[test]
    fn summaries() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        let (m, s) = mean_sd(&[1.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }
}
