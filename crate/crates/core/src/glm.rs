//! Poisson regression of the observed cells on broadcast row and column
//! covariates with a fixed offset matrix, solved by damped Newton steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::CountTable;

const MAX_HALVINGS: usize = 60;
const NOISE_FACTOR: f64 = 64.0;

pub(crate) struct PoissonRegression<'a> {
    pub table: &'a CountTable,
    pub offset: &'a DMatrix<f64>,
    pub row: &'a DMatrix<f64>,
    pub col: &'a DMatrix<f64>,
    pub intercept: bool,
    pub exp_cap: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct GlmFit {
    pub coef: DVector<f64>,
}

impl PoissonRegression<'_> {
    fn n_coef(&self) -> usize {
        usize::from(self.intercept) + self.row.ncols() + self.col.ncols()
    }

    fn split(&self, b: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
        let k0 = usize::from(self.intercept);
        let k1 = self.row.ncols();
        let k2 = self.col.ncols();
        let c = if self.intercept { b[0] } else { 0.0 };
        (
            c,
            b.rows(k0, k1).into_owned(),
            b.rows(k0 + k1, k2).into_owned(),
        )
    }

    pub fn linear_predictor(&self, b: &DVector<f64>) -> DMatrix<f64> {
        let (c, a, g) = self.split(b);
        let re = self.row * a;
        let ce = self.col * g;
        DMatrix::from_fn(self.offset.nrows(), self.offset.ncols(), |i, j| {
            self.offset[(i, j)] + c + re[i] + ce[j]
        })
    }

    /// Objective at `b`, or `None` when a natural parameter leaves the
    /// admissible range.
    fn objective(&self, b: &DVector<f64>) -> Option<f64> {
        self.objective_with_scale(b).map(|(f, _)| f)
    }

    /// Objective together with the sum of the magnitudes of its terms, which
    /// bounds its rounding error.
    fn objective_with_scale(&self, b: &DVector<f64>) -> Option<(f64, f64)> {
        let eta = self.linear_predictor(b);
        let y = self.table.observed_values();
        let mask = self.table.mask();
        let mut total = 0.0;
        let mut scale = 0.0;
        for (k, &e) in eta.iter().enumerate() {
            if mask[k] {
                if !(e <= self.exp_cap) {
                    return None;
                }
                let (m, l) = (e.exp(), y[k] * e);
                total += m - l;
                scale += m + l.abs();
            }
        }
        Some((total, scale))
    }

    /// Gradient and Hessian of the objective at `b`.
    fn derivatives(&self, b: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let eta = self.linear_predictor(b);
        let y = self.table.observed_values();
        let w = self.table.weights();
        let mean = eta.zip_map(w, |e, wk| if wk > 0.0 { e.exp() } else { 0.0 });
        let resid = &mean - y.component_mul(w);

        let q = self.n_coef();
        let k0 = usize::from(self.intercept);
        let k1 = self.row.ncols();
        let k2 = self.col.ncols();
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);

        let r_rows = DVector::from_iterator(resid.nrows(), resid.row_iter().map(|r| r.sum()));
        let r_cols = DVector::from_iterator(resid.ncols(), resid.column_iter().map(|c| c.sum()));
        let w_rows = DVector::from_iterator(mean.nrows(), mean.row_iter().map(|r| r.sum()));
        let w_cols = DVector::from_iterator(mean.ncols(), mean.column_iter().map(|c| c.sum()));

        if self.intercept {
            grad[0] = r_rows.sum();
            hess[(0, 0)] = w_rows.sum();
        }
        if k1 > 0 {
            grad.rows_mut(k0, k1).copy_from(&(self.row.transpose() * &r_rows));
            let weighted = DMatrix::from_fn(self.row.nrows(), k1, |i, k| self.row[(i, k)] * w_rows[i]);
            hess.view_mut((k0, k0), (k1, k1))
                .copy_from(&(self.row.transpose() * &weighted));
            if self.intercept {
                let cross = self.row.transpose() * &w_rows;
                hess.view_mut((0, k0), (1, k1)).copy_from(&cross.transpose());
                hess.view_mut((k0, 0), (k1, 1)).copy_from(&cross);
            }
        }
        if k2 > 0 {
            let off = k0 + k1;
            grad.rows_mut(off, k2).copy_from(&(self.col.transpose() * &r_cols));
            let weighted = DMatrix::from_fn(self.col.nrows(), k2, |j, k| self.col[(j, k)] * w_cols[j]);
            hess.view_mut((off, off), (k2, k2))
                .copy_from(&(self.col.transpose() * &weighted));
            if self.intercept {
                let cross = self.col.transpose() * &w_cols;
                hess.view_mut((0, off), (1, k2)).copy_from(&cross.transpose());
                hess.view_mut((off, 0), (k2, 1)).copy_from(&cross);
            }
            if k1 > 0 {
                let cross = self.row.transpose() * &mean * self.col;
                hess.view_mut((k0, off), (k1, k2)).copy_from(&cross);
                hess.view_mut((off, k0), (k2, k1)).copy_from(&cross.transpose());
            }
        }
        (grad, hess)
    }

    /// Gradient scale below which the fit counts as converged: `tol` times
    /// one plus the observed total, so that tables of large counts are judged
    /// relative to their floating-point resolution.
    fn gradient_bound(&self, tol: f64) -> f64 {
        tol * (1.0 + self.table.observed_total())
    }

    #[cfg(test)]
    pub fn gradient_norm(&self, b: &DVector<f64>) -> f64 {
        self.derivatives(b).0.amax()
    }

    pub fn fit(&self, start: DVector<f64>, tol: f64, max_iters: usize) -> Result<GlmFit> {
        let q = self.n_coef();
        if start.len() != q {
            return Err(Error::DimensionMismatch(format!(
                "{} starting coefficients for {q} columns",
                start.len()
            )));
        }
        let mut b = start;
        let mut f = self.objective(&b).ok_or(Error::NumericRange {
            row: 0,
            col: 0,
            value: f64::INFINITY,
            cap: self.exp_cap,
        })?;
        if q == 0 {
            return Ok(GlmFit { coef: b });
        }
        let bound = self.gradient_bound(tol);
        for _ in 0..max_iters {
            let (grad, hess) = self.derivatives(&b);
            if grad.amax() <= bound {
                return Ok(GlmFit {
                    coef: b,
                });
            }
            let chol = hess.cholesky().ok_or(Error::RankDeficient)?;
            let step = chol.solve(&(-&grad));
            if step.iter().any(|s| !s.is_finite()) {
                return Err(Error::RankDeficient);
            }
            // Inside the quadratic regime the predicted decrease can fall
            // below the rounding error of the objective; the full Newton step
            // is then taken on the strength of the gradient alone.
            let predicted = -grad.dot(&step) / 2.0;
            let (_, scale) = self.objective_with_scale(&b).unwrap_or((f, f64::INFINITY));
            if predicted <= NOISE_FACTOR * f64::EPSILON * scale {
                let cand = &b + &step;
                if let Some(fc) = self.objective(&cand) {
                    b = cand;
                    f = fc;
                    continue;
                }
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let cand = &b + &step * t;
                if cand == b {
                    break;
                }
                match self.objective(&cand) {
                    Some(fc) if fc <= f => {
                        b = cand;
                        f = fc;
                        accepted = true;
                        break;
                    }
                    _ => t *= 0.5,
                }
            }
            if !accepted {
                // No representable decrease along the Newton direction: the
                // iterate sits at the floating-point floor of the objective.
                return Ok(GlmFit {
                    coef: b,
                });
            }
        }
        let (grad, _) = self.derivatives(&b);
        if grad.amax() <= bound {
            Ok(GlmFit { coef: b })
        } else {
            Err(Error::NonConvergence {
                what: "poisson regression",
                iters: max_iters,
            })
        }
    }
}
