//! Products of a fitted model: imputed and completed tables, the
//! multiplicative decomposition of the fitted means, biplot coordinates and
//! correlations between covariates and interaction axes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DEFAULT_RANK_TOL};
use crate::model::{self, CountTable, CovariateSet, ModelParams};

/// Fitted means `exp(x)` at every cell, observed or not.
pub fn impute(table: &CountTable, params: &ModelParams, cov: &CovariateSet) -> Result<DMatrix<f64>> {
    cov.check_table(table)?;
    Ok(model::build_natural_params(params, cov)?.means())
}

/// Observed counts where available and `imputed` elsewhere.
pub fn completed_table(table: &CountTable, imputed: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if imputed.shape() != table.shape() {
        return Err(Error::DimensionMismatch(format!(
            "imputed {:?} vs table {:?}",
            imputed.shape(),
            table.shape()
        )));
    }
    Ok(DMatrix::from_fn(table.nrows(), table.ncols(), |i, j| match table.count(i, j) {
        Some(y) => y as f64,
        None => imputed[(i, j)],
    }))
}

/// `exp(x) = offset .* row .* col .* interaction`, elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub offset: DMatrix<f64>,
    pub row: DMatrix<f64>,
    pub col: DMatrix<f64>,
    pub interaction: DMatrix<f64>,
}

impl Decomposition {
    pub fn product(&self) -> DMatrix<f64> {
        self.offset
            .component_mul(&self.row)
            .component_mul(&self.col)
            .component_mul(&self.interaction)
    }
}

pub fn multiplicative_decomposition(params: &ModelParams, cov: &CovariateSet) -> Result<Decomposition> {
    params.check_dims(cov)?;
    let (n, p) = params.theta.shape();
    let row_effect = cov.row() * &params.alpha;
    let col_effect = cov.col() * &params.beta;
    Ok(Decomposition {
        offset: DMatrix::from_element(n, p, params.mu.exp()),
        row: DMatrix::from_fn(n, p, |i, _| row_effect[i].exp()),
        col: DMatrix::from_fn(n, p, |_, j| col_effect[j].exp()),
        interaction: params.theta.map(f64::exp),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiplotCoords {
    pub row_points: DMatrix<f64>,
    pub col_points: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub d: usize,
}

/// Rows and columns of the interaction matrix in `d` dimensions: singular
/// vectors scaled by the square roots of their singular values. Axes whose
/// singular value is at or below the rank tolerance sit at the origin.
pub fn biplot_coordinates(theta: &DMatrix<f64>, d: usize) -> Result<BiplotCoords> {
    let (n, p) = theta.shape();
    if d == 0 || d > n.min(p) {
        return Err(Error::Invalid(format!(
            "biplot dimension must lie in 1..={}, got {d}",
            n.min(p)
        )));
    }
    let svd = linalg::svd_thin(theta)?;
    let s = DVector::from_fn(d, |k, _| if svd.s[k] > DEFAULT_RANK_TOL { svd.s[k] } else { 0.0 });
    let root = s.map(f64::sqrt);
    let row_points = DMatrix::from_fn(n, d, |i, k| svd.u[(i, k)] * root[k]);
    let col_points = DMatrix::from_fn(p, d, |j, k| svd.v[(j, k)] * root[k]);
    Ok(BiplotCoords {
        row_points,
        col_points,
        singular_values: s,
        d,
    })
}

/// Pearson correlations of each covariate with each of the first `d` left
/// (rows) or right (columns) singular vectors. `None` marks an axis whose
/// singular value is at or below the rank tolerance, or a covariate without
/// variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionCorrelations {
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
    pub row: Vec<Vec<Option<f64>>>,
    pub col: Vec<Vec<Option<f64>>>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn correlate(covariates: &DMatrix<f64>, vectors: &DMatrix<f64>, s: &DVector<f64>, d: usize) -> Vec<Vec<Option<f64>>> {
    covariates
        .column_iter()
        .map(|c| {
            let c: Vec<f64> = c.iter().copied().collect();
            (0..d)
                .map(|k| {
                    if s[k] <= DEFAULT_RANK_TOL {
                        return None;
                    }
                    let v: Vec<f64> = vectors.column(k).iter().copied().collect();
                    pearson(&c, &v)
                })
                .collect()
        })
        .collect()
}

pub fn interaction_covariate_correlations(
    theta: &DMatrix<f64>,
    cov: &CovariateSet,
    d: usize,
) -> Result<InteractionCorrelations> {
    let (n, p) = theta.shape();
    if cov.row().nrows() != n || cov.col().nrows() != p {
        return Err(Error::DimensionMismatch(format!(
            "interaction {n}x{p} vs covariates for {} rows and {} columns",
            cov.row().nrows(),
            cov.col().nrows()
        )));
    }
    if cov.n_covariates() == 0 {
        return Err(Error::Invalid("correlations need at least one covariate".into()));
    }
    if d == 0 || d > n.min(p) {
        return Err(Error::Invalid(format!(
            "number of axes must lie in 1..={}, got {d}",
            n.min(p)
        )));
    }
    let svd = linalg::svd_thin(theta)?;
    Ok(InteractionCorrelations {
        row_names: cov.row_scaling().iter().map(|s| s.name.clone()).collect(),
        col_names: cov.col_scaling().iter().map(|s| s.name.clone()).collect(),
        row: correlate(cov.row(), &svd.u, &svd.s, d),
        col: correlate(cov.col(), &svd.v, &svd.s, d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, n: usize, p: usize, k1: usize, k2: usize) -> (ModelParams, CovariateSet) {
        let row = DMatrix::from_fn(n, k1, |_, _| rng.random_range(-1.0..1.0));
        let col = DMatrix::from_fn(p, k2, |_, _| rng.random_range(-1.0..1.0));
        let theta = linalg::interaction_projector(&DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let params = ModelParams {
            mu: rng.random_range(-1.0..2.0),
            alpha: DVector::from_fn(k1, |_, _| rng.random_range(-1.0..1.0)),
            beta: DVector::from_fn(k2, |_, _| rng.random_range(-1.0..1.0)),
            theta,
        };
        (params, CovariateSet::from_scaled(row, col).unwrap())
    }

    #[test]
    fn constant_model_imputes_two() {
        let table = CountTable::from_counts(
            DMatrix::from_row_slice(2, 2, &[1, 2, 3, 4]),
            DMatrix::from_row_slice(2, 2, &[true, false, true, true]),
        )
        .unwrap();
        let cov = CovariateSet::none(2, 2);
        let mut params = ModelParams::zeros(2, 2, 0, 0);
        params.mu = 2f64.ln();
        let imputed = impute(&table, &params, &cov).unwrap();
        assert!(imputed.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let done = completed_table(&table, &imputed).unwrap();
        assert_eq!(done, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn decomposition_reconstructs_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let (params, cov) = random_params(&mut rng, 7, 5, 2, 1);
            let dec = multiplicative_decomposition(&params, &cov).unwrap();
            let means = model::build_natural_params(&params, &cov).unwrap().means();
            let prod = dec.product();
            for (a, b) in prod.iter().zip(means.iter()) {
                assert!((a - b).abs() <= 1e-10 * b.abs());
            }
        }
    }

    #[test]
    fn trivial_factors_are_one() {
        let mut params = ModelParams::zeros(3, 2, 0, 0);
        params.mu = 0.7;
        let dec = multiplicative_decomposition(&params, &CovariateSet::none(3, 2)).unwrap();
        assert!(dec.interaction.iter().all(|&v| v == 1.0));
        assert!(dec.row.iter().chain(dec.col.iter()).all(|&v| v == 1.0));
    }

    #[test]
    fn zero_theta_biplot_at_origin() {
        let b = biplot_coordinates(&DMatrix::zeros(4, 3), 2).unwrap();
        assert!(b.row_points.iter().chain(b.col_points.iter()).all(|&v| v == 0.0));
        assert!(biplot_coordinates(&DMatrix::zeros(4, 3), 4).is_err());
        assert!(biplot_coordinates(&DMatrix::zeros(4, 3), 0).is_err());
    }

    #[test]
    fn rank_one_biplot() {
        let u = DVector::from_vec(vec![0.6, -0.8, 0.0]);
        let v = DVector::from_vec(vec![0.0, 1.0]);
        let theta = &u * v.transpose() * 4.0;
        let b = biplot_coordinates(&theta, 1).unwrap();
        // Sign convention: the largest-magnitude entry of u is nonnegative.
        let u = -u;
        let v = -v;
        for i in 0..3 {
            assert!((b.row_points[(i, 0)] - u[i] * 2.0).abs() < 1e-12);
        }
        for j in 0..2 {
            assert!((b.col_points[(j, 0)] - v[j] * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn biplot_reconstructs_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let theta = linalg::interaction_projector(&DMatrix::from_fn(8, 6, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let svd = linalg::svd_thin(&theta).unwrap();
        for d in 1..=3 {
            let b = biplot_coordinates(&theta, d).unwrap();
            let approx = &b.row_points * b.col_points.transpose();
            assert!((approx - svd.reconstruct(Some(d))).amax() < 1e-8);
        }
    }

    #[test]
    fn closer_points_have_larger_inner_products() {
        // Rank one with unit-norm points: squared distance is 2 - 2 <r, c>.
        let theta = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let b = biplot_coordinates(&theta, 1).unwrap();
        let r0 = b.row_points.row(0);
        let dist = |j: usize| (r0 - b.col_points.row(j)).norm_squared();
        let inner = |j: usize| r0.dot(&b.col_points.row(j));
        assert!((dist(0) < dist(1)) == (inner(0) > inner(1)));
    }

    #[test]
    fn correlation_with_own_axis_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = linalg::interaction_projector(&DMatrix::from_fn(9, 5, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let svd = linalg::svd_thin(&theta).unwrap();
        let row = DMatrix::from_fn(9, 1, |i, _| svd.u[(i, 0)] * 3.0 + 1.0);
        let ones = DMatrix::from_fn(5, 1, |j, _| if j % 2 == 0 { 1.0 } else { -1.0 });
        let cov = CovariateSet::from_scaled(row, ones).unwrap();
        let corr = interaction_covariate_correlations(&theta, &cov, 2).unwrap();
        assert!((corr.row[0][0].unwrap() - 1.0).abs() < 1e-10);
        assert!(corr.row[0][1].unwrap().abs() < 1e-10);
    }

    #[test]
    fn correlation_undefined_on_null_axis() {
        let theta = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let row = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 4.0]);
        let cov = CovariateSet::from_scaled(row, DMatrix::zeros(3, 0)).unwrap();
        let corr = interaction_covariate_correlations(&theta, &cov, 2).unwrap();
        assert!(corr.row[0][0].is_some());
        assert_eq!(corr.row[0][1], None);
        assert!(interaction_covariate_correlations(&theta, &CovariateSet::none(3, 3), 1).is_err());
    }

    #[test]
    fn correlations_match_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (params, cov) = random_params(&mut rng, 10, 6, 2, 2);
        let corr = interaction_covariate_correlations(&params.theta, &cov, 2).unwrap();
        let svd = linalg::svd_thin(&params.theta).unwrap();
        // Oracle: covariance over the product of standard deviations, with
        // the population divisor throughout.
        let oracle = |x: Vec<f64>, y: Vec<f64>| {
            let n = x.len() as f64;
            let mx = x.iter().sum::<f64>() / n;
            let my = y.iter().sum::<f64>() / n;
            let cxy = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n - mx * my;
            let vx = x.iter().map(|a| a * a).sum::<f64>() / n - mx * mx;
            let vy = y.iter().map(|b| b * b).sum::<f64>() / n - my * my;
            cxy / (vx * vy).sqrt()
        };
        for k in 0..2 {
            for d in 0..2 {
                let x: Vec<f64> = cov.row().column(k).iter().copied().collect();
                let y: Vec<f64> = svd.u.column(d).iter().copied().collect();
                assert!((corr.row[k][d].unwrap() - oracle(x, y)).abs() < 1e-10);
                let x: Vec<f64> = cov.col().column(k).iter().copied().collect();
                let y: Vec<f64> = svd.v.column(d).iter().copied().collect();
                assert!((corr.col[k][d].unwrap() - oracle(x, y)).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn correlations_are_bounded(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (params, cov) = random_params(&mut rng, 6, 5, 1, 2);
            let corr = interaction_covariate_correlations(&params.theta, &cov, 2).unwrap();
            for v in corr.row.iter().chain(corr.col.iter()).flatten().flatten() {
                prop_assert!((-1.0..=1.0).contains(v));
            }
        }
    }
}
