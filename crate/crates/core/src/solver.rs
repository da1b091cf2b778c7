//! Alternating minimization over the offset, the covariate coefficients and
//! the interaction matrix, with a backtracking proximal-gradient step on the
//! interaction and a warm-started regularization path.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::PoissonRegression;
use crate::linalg;
use crate::model::{self, CountTable, CovariateSet, ModelParams, DEFAULT_EXP_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stop once the decrease of the penalized objective over one outer
    /// iteration, relative to its gap above the saturated data fit, falls to
    /// this level.
    pub tol: f64,
    pub max_outer_iters: usize,
    /// Step halvings tried per interaction update before giving up on it.
    pub max_backtracks: usize,
    pub glm_tol: f64,
    pub glm_max_iters: usize,
    pub exp_cap: f64,
    /// Optional box `|x_ij| <= gamma` applied to the natural parameters.
    pub clamp: Option<f64>,
    /// Extrapolate the interaction update along its previous move, with a
    /// restart whenever that would not lower the objective.
    pub acceleration: bool,
    /// Run independent fits (bootstrap replicates, folds, benchmark reps) on
    /// the thread pool. Ignored without the `parallel` feature.
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_outer_iters: 500,
            max_backtracks: 60,
            glm_tol: 1e-10,
            glm_max_iters: 100,
            exp_cap: DEFAULT_EXP_CAP,
            clamp: None,
            acceleration: true,
            parallel: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol", self.tol),
            ("glm_tol", self.glm_tol),
            ("exp_cap", self.exp_cap),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_outer_iters == 0 || self.max_backtracks == 0 || self.glm_max_iters == 0 {
            return Err(Error::Invalid("iteration caps must be at least 1".into()));
        }
        if let Some(g) = self.clamp {
            if !(g > 0.0) {
                return Err(Error::Invalid(format!("clamp must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ModelParams,
    pub lambda: f64,
    /// Penalized objective at the start and after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub n_iters: usize,
    pub converged: bool,
    pub effective_rank: usize,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace always holds the initial objective")
    }

    /// True when no recorded objective exceeds its predecessor by more than `slack`.
    pub fn trace_nonincreasing(&self, slack: f64) -> bool {
        self.objective_trace.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

/// Evaluates the data fit under the solver's cap and optional clamp; `None`
/// signals that the natural parameters left the admissible range.
struct Objective<'a> {
    table: &'a CountTable,
    cov: &'a CovariateSet,
    config: &'a SolverConfig,
}

impl Objective<'_> {
    fn natural(&self, params: &ModelParams) -> Result<DMatrix<f64>> {
        let x = model::build_natural_params(params, self.cov)?;
        Ok(match self.config.clamp {
            Some(g) => x.clamp(g).into_inner(),
            None => x.into_inner(),
        })
    }

    fn data_fit(&self, params: &ModelParams) -> Result<f64> {
        let x = self.natural(params)?;
        model::data_fit_capped(self.table, &x, self.config.exp_cap)
    }

    fn data_fit_or_none(&self, params: &ModelParams) -> Result<Option<f64>> {
        match self.data_fit(params) {
            Ok(v) => Ok(Some(v)),
            Err(Error::NumericRange { .. } | Error::NonFinite(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn gradient(&self, params: &ModelParams) -> Result<DMatrix<f64>> {
        let x = self.natural(params)?;
        model::data_fit_gradient_capped(self.table, &x, self.config.exp_cap)
    }
}

fn check_inputs(table: &CountTable, cov: &CovariateSet, params: &ModelParams) -> Result<()> {
    cov.check_table(table)?;
    params.check_dims(cov)
}

/// Data fit of the saturated model `exp(x) = y`, a lower bound on the data
/// fit. Objective decreases are measured relative to the gap above it.
pub fn saturated_data_fit(table: &CountTable) -> f64 {
    table
        .observed_cells()
        .filter(|&(_, _, y)| y > 0)
        .map(|(_, _, y)| {
            let y = y as f64;
            y - y * y.ln()
        })
        .sum()
}

/// Closed-form minimizer of the data fit in the offset:
/// `log(sum_obs y / sum_obs exp(x - mu))`.
pub fn update_offset(table: &CountTable, cov: &CovariateSet, params: &ModelParams) -> Result<f64> {
    check_inputs(table, cov, params)?;
    let total = table.observed_total();
    if total <= 0.0 {
        return Err(Error::DegenerateOffset);
    }
    let x = model::build_natural_params(params, cov)?.into_inner();
    let mask = table.mask();
    let shifted: Vec<f64> = x
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v - params.mu)
        .collect();
    if shifted.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("natural parameters"));
    }
    let peak = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = peak + shifted.iter().map(|v| (v - peak).exp()).sum::<f64>().ln();
    Ok(total.ln() - log_sum)
}

/// Poisson regression of the observed counts on the covariates with offset
/// `mu + theta`, started from the current coefficients.
pub fn update_coefficients(
    table: &CountTable,
    cov: &CovariateSet,
    params: &ModelParams,
    config: &SolverConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_inputs(table, cov, params)?;
    let (k1, k2) = (cov.k_row(), cov.k_col());
    if k1 + k2 == 0 {
        return Ok((DVector::zeros(0), DVector::zeros(0)));
    }
    if k1 + k2 >= table.n_observed() {
        return Err(Error::Invalid(format!(
            "{} covariates for {} observed cells",
            k1 + k2,
            table.n_observed()
        )));
    }
    let offset = params.theta.add_scalar(params.mu);
    let reg = PoissonRegression {
        table,
        offset: &offset,
        row: cov.row(),
        col: cov.col(),
        intercept: false,
        exp_cap: config.exp_cap,
    };
    let start = DVector::from_iterator(k1 + k2, params.alpha.iter().chain(params.beta.iter()).copied());
    let fit = reg.fit(start, config.glm_tol, config.glm_max_iters)?;
    Ok((
        fit.coef.rows(0, k1).into_owned(),
        fit.coef.rows(k1, k2).into_owned(),
    ))
}

/// Main-effects-only fit (`theta = 0`): Poisson regression with an intercept.
pub(crate) fn main_effects_fit(
    table: &CountTable,
    cov: &CovariateSet,
    config: &SolverConfig,
) -> Result<ModelParams> {
    cov.check_table(table)?;
    let total = table.observed_total();
    if total <= 0.0 {
        return Err(Error::DegenerateOffset);
    }
    let (k1, k2) = (cov.k_row(), cov.k_col());
    if k1 + k2 + 1 > table.n_observed() {
        return Err(Error::Invalid(format!(
            "{} main-effect parameters for {} observed cells",
            k1 + k2 + 1,
            table.n_observed()
        )));
    }
    let (n, p) = table.shape();
    let offset = DMatrix::zeros(n, p);
    let reg = PoissonRegression {
        table,
        offset: &offset,
        row: cov.row(),
        col: cov.col(),
        intercept: true,
        exp_cap: config.exp_cap,
    };
    let mut start = DVector::zeros(1 + k1 + k2);
    start[0] = (total / table.n_observed() as f64).ln();
    let fit = reg.fit(start, config.glm_tol, config.glm_max_iters)?;
    Ok(ModelParams {
        mu: fit.coef[0],
        alpha: fit.coef.rows(1, k1).into_owned(),
        beta: fit.coef.rows(1 + k1, k2).into_owned(),
        theta: DMatrix::zeros(n, p),
    })
}

/// Starting point used when `fit` gets no `init`: the main-effects fit when
/// `lambda` is at or above its null-thresholding statistic (where it is the
/// solution), otherwise whichever of the main-effects fit and the log-scale
/// starts has the lower penalized objective.
pub fn default_start(table: &CountTable, cov: &CovariateSet, lambda: f64, config: &SolverConfig) -> Result<ModelParams> {
    let null = main_effects_fit(table, cov, config)?;
    let objective = Objective { table, cov, config };
    let grad = linalg::interaction_projector(&objective.gradient(&null)?)?;
    if lambda >= linalg::operator_norm(&grad)? {
        return Ok(null);
    }
    let mut best_value = objective.data_fit(&null)?;
    let mut best = null;
    for cand in log_scale_starts(table, cov, config)? {
        let Some(f) = objective.data_fit_or_none(&cand)? else {
            continue;
        };
        let value = f + lambda * linalg::nuclear_norm(&cand.theta)?;
        if value < best_value {
            best_value = value;
            best = cand;
        }
    }
    Ok(best)
}

/// Least-squares fit of `log(y + 1/2)` on the observed cells: main effects
/// by ordinary least squares, then rank truncations of the doubly centered
/// residual, each followed by a Poisson refit of the offset and the
/// coefficients. Truncations whose refit fails are skipped.
fn log_scale_starts(table: &CountTable, cov: &CovariateSet, config: &SolverConfig) -> Result<Vec<ModelParams>> {
    let (n, p) = table.shape();
    let (k1, k2) = (cov.k_row(), cov.k_col());
    let q = 1 + k1 + k2;
    let z = table.stored_counts().map(|y| (y as f64 + 0.5).ln());
    let mut xtx = DMatrix::<f64>::zeros(q, q);
    let mut xty = DVector::<f64>::zeros(q);
    let mut design = DVector::<f64>::zeros(q);
    for (i, j, _) in table.observed_cells() {
        design[0] = 1.0;
        for k in 0..k1 {
            design[1 + k] = cov.row()[(i, k)];
        }
        for k in 0..k2 {
            design[1 + k1 + k] = cov.col()[(j, k)];
        }
        xtx.syger(1.0, &design, &design, 1.0);
        xty.axpy(z[(i, j)], &design, 1.0);
    }
    let Some(chol) = xtx.cholesky() else {
        return Ok(Vec::new());
    };
    let coef = chol.solve(&xty);
    let main = ModelParams {
        mu: coef[0],
        alpha: coef.rows(1, k1).into_owned(),
        beta: coef.rows(1 + k1, k2).into_owned(),
        theta: DMatrix::zeros(n, p),
    };
    let fitted = model::main_effects(main.mu, &main.alpha, &main.beta, cov)?;
    let resid = DMatrix::from_fn(n, p, |i, j| {
        if table.is_observed(i, j) {
            z[(i, j)] - fitted[(i, j)]
        } else {
            0.0
        }
    });
    let svd = linalg::svd_thin(&linalg::interaction_projector(&resid)?)?;
    let rank = svd.s.iter().filter(|&&v| v > linalg::DEFAULT_RANK_TOL).count();
    let mut ranks = Vec::new();
    let (mut a, mut b) = (1, 2);
    while a <= rank {
        ranks.push(a);
        (a, b) = (b, a + b);
    }
    let mut starts = Vec::with_capacity(ranks.len());
    for r in ranks {
        let mut cand = ModelParams {
            theta: svd.reconstruct(Some(r)),
            ..main.clone()
        };
        let refit = (|| -> Result<()> {
            cand.mu = update_offset(table, cov, &cand)?;
            if k1 + k2 > 0 {
                (cand.alpha, cand.beta) = update_coefficients(table, cov, &cand, config)?;
            }
            Ok(())
        })();
        if refit.is_ok() {
            starts.push(cand);
        }
    }
    Ok(starts)
}

/// Outcome of one proximal-gradient trial on the interaction matrix.
#[derive(Debug, Clone)]
pub struct InteractionStep {
    pub theta: DMatrix<f64>,
    pub accepted: bool,
    /// Penalized objective of the candidate, `None` if it left the admissible range.
    pub objective: Option<f64>,
}

/// Gradient of the data fit in `theta`, projected onto the doubly centered
/// matrices, plus what is needed to score candidates.
struct InteractionProblem<'a> {
    objective: Objective<'a>,
    params: &'a ModelParams,
    lambda: f64,
    projected_grad: DMatrix<f64>,
    rule: Acceptance,
}

/// When a candidate step counts as accepted.
#[derive(Clone, Copy)]
enum Acceptance {
    /// The penalized objective does not exceed this value.
    Descent(f64),
    /// The data fit lies under the quadratic model built at the base point,
    /// whose data fit is given.
    Majorized(f64),
}

impl<'a> InteractionProblem<'a> {
    fn new(objective: Objective<'a>, params: &'a ModelParams, lambda: f64, rule: Acceptance) -> Result<Self> {
        let grad = objective.gradient(params)?;
        let projected_grad = linalg::interaction_projector(&grad)?;
        Ok(Self {
            objective,
            params,
            lambda,
            projected_grad,
            rule,
        })
    }

    /// Candidate `D_{tau*lambda}(theta - tau * P(grad))`.
    fn trial(&self, tau: f64) -> Result<(InteractionStep, f64)> {
        let moved = &self.params.theta - &self.projected_grad * tau;
        let (theta, norm) = linalg::soft_threshold_with_norm(&moved, tau * self.lambda)?;
        let cand = ModelParams {
            theta,
            ..self.params.clone()
        };
        let data_fit = self.objective.data_fit_or_none(&cand)?;
        let value = data_fit.map(|f| f + self.lambda * norm);
        let accepted = match (self.rule, data_fit) {
            (_, None) => false,
            (Acceptance::Descent(current), Some(_)) => value.is_some_and(|v| v <= current),
            (Acceptance::Majorized(base), Some(f)) => {
                let delta = &cand.theta - &self.params.theta;
                f <= base + self.projected_grad.dot(&delta) + delta.norm_squared() / (2.0 * tau)
            }
        };
        Ok((
            InteractionStep {
                theta: cand.theta,
                accepted,
                objective: value,
            },
            norm,
        ))
    }

    /// Halves the step from `tau` until a trial is accepted. Returns the
    /// accepted step, its nuclear norm and the step size.
    fn backtrack(&self, tau: f64, max_backtracks: usize) -> Result<Option<(InteractionStep, f64, f64)>> {
        let mut tau = tau;
        for _ in 0..=max_backtracks {
            let (step, norm) = self.trial(tau)?;
            if step.accepted {
                return Ok(Some((step, norm, tau)));
            }
            tau *= 0.5;
        }
        Ok(None)
    }
}

/// A single trial of the interaction update with step size `tau`.
pub fn update_interaction_step(
    table: &CountTable,
    cov: &CovariateSet,
    params: &ModelParams,
    lambda: f64,
    tau: f64,
    config: &SolverConfig,
) -> Result<InteractionStep> {
    check_inputs(table, cov, params)?;
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("step size must be positive, got {tau}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let objective = Objective { table, cov, config };
    let current = objective.data_fit(params)? + lambda * linalg::nuclear_norm(&params.theta)?;
    let problem = InteractionProblem::new(objective, params, lambda, Acceptance::Descent(current))?;
    Ok(problem.trial(tau)?.0)
}

/// Minimizes the data fit plus `lambda` times the nuclear norm of the
/// interaction matrix.
///
/// Without `init` the iterations start from [`default_start`]. Running out of
/// iterations is reported through `converged = false`, not as an error.
pub fn fit(
    table: &CountTable,
    cov: &CovariateSet,
    lambda: f64,
    config: &SolverConfig,
    init: Option<ModelParams>,
) -> Result<FitResult> {
    config.validate()?;
    if !(lambda >= 0.0) || lambda.is_nan() {
        return Err(Error::Invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let mut params = match init {
        Some(p) => p,
        None => default_start(table, cov, lambda, config)?,
    };
    check_inputs(table, cov, &params)?;

    let objective = Objective { table, cov, config };
    let mut nuclear = linalg::nuclear_norm(&params.theta)?;
    let mut current = objective.data_fit(&params)? + lambda * nuclear;
    let mut trace = vec![current];
    let floor = saturated_data_fit(table);
    let mut converged = false;
    let mut n_iters = 0;
    let has_covariates = cov.n_covariates() > 0;
    // Step sizes start from twice the last accepted one, capped at 1.
    let mut last_tau: f64 = 0.5;
    let mut momentum: f64 = 1.0;
    let mut previous_theta = params.theta.clone();

    for _ in 0..config.max_outer_iters {
        n_iters += 1;
        let previous = current;

        // Each block update is kept only if the computed objective does not
        // rise, so the trace is monotone in floating point as well.
        let mu = update_offset(table, cov, &params)?;
        let cand = ModelParams { mu, ..params.clone() };
        if let Some(f) = objective.data_fit_or_none(&cand)? {
            let value = f + lambda * nuclear;
            if value <= current {
                params = cand;
                current = value;
            }
        }

        if has_covariates {
            let (alpha, beta) = update_coefficients(table, cov, &params, config)?;
            let cand = ModelParams {
                alpha,
                beta,
                ..params.clone()
            };
            if let Some(f) = objective.data_fit_or_none(&cand)? {
                let value = f + lambda * nuclear;
                if value <= current {
                    params = cand;
                    current = value;
                }
            }
        }

        let start_tau = (2.0 * last_tau).min(1.0);
        let mut outcome = None;
        if config.acceleration && momentum > 1.0 {
            // Extrapolate along the last interaction move and take a
            // majorized step from there; keep it only if it also lowers the
            // penalized objective, otherwise restart the momentum.
            let next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            let weight = (momentum - 1.0) / next;
            let base = ModelParams {
                theta: &params.theta + (&params.theta - &previous_theta) * weight,
                ..params.clone()
            };
            if let Some(base_fit) = objective.data_fit_or_none(&base)? {
                let problem = InteractionProblem::new(
                    Objective { table, cov, config },
                    &base,
                    lambda,
                    Acceptance::Majorized(base_fit),
                )?;
                if let Some((step, norm, tau)) = problem.backtrack(start_tau, config.max_backtracks)? {
                    if step.objective.is_some_and(|v| v <= current) {
                        outcome = Some((step, norm));
                        last_tau = tau;
                        momentum = next;
                    }
                }
            }
        }
        if outcome.is_none() {
            momentum = 1.0;
            let problem = InteractionProblem::new(
                Objective { table, cov, config },
                &params,
                lambda,
                Acceptance::Descent(current),
            )?;
            if let Some((step, norm, tau)) = problem.backtrack(start_tau, config.max_backtracks)? {
                outcome = Some((step, norm));
                last_tau = tau;
                if config.acceleration {
                    momentum = (1.0 + 5f64.sqrt()) / 2.0;
                }
            }
        }
        if let Some((step, norm)) = outcome {
            previous_theta = std::mem::replace(&mut params.theta, step.theta);
            nuclear = norm;
            current = step.objective.expect("accepted steps carry an objective");
        }

        trace.push(current);
        let decrease = (previous - current) / (previous - floor).abs().max(1.0);
        if decrease <= config.tol {
            converged = true;
            break;
        }
    }

    let effective_rank = linalg::effective_rank(&params.theta, linalg::DEFAULT_RANK_TOL)?;
    Ok(FitResult {
        params,
        lambda,
        objective_trace: trace,
        n_iters,
        converged,
        effective_rank,
    })
}

/// Fits a strictly descending grid of penalties, starting each fit from the
/// previous solution.
pub fn fit_path(
    table: &CountTable,
    cov: &CovariateSet,
    lambdas: &[f64],
    config: &SolverConfig,
) -> Result<Vec<FitResult>> {
    if lambdas.is_empty() {
        return Err(Error::Invalid("empty lambda grid".into()));
    }
    if lambdas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Invalid("lambda grid must be strictly descending".into()));
    }
    let mut results: Vec<FitResult> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let init = results.last().map(|r| r.params.clone());
        results.push(fit(table, cov, lambda, config, init)?);
    }
    Ok(results)
}
