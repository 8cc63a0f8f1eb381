//! Model, family and initial parameters for each fit experiment, plus the
//! held-out log loss.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::distributions::{ln_det_spd, sqrt_spd, RandomStream};
use crate::error::{Error, Result};
use crate::estimators::{BlockMethod, EstimatorPlan};
use crate::families::{sample_centers, Factor, FactorKind, FamilySpec, Theta, VariationalParams, DOMAIN_MARGIN};
use crate::models::{LinReg, LinRegData, StudentWishart, StudentWishartData};

/// Cold start of the regression fit.
pub const LINREG_INIT_SHAPE: f64 = 200.0;
pub const LINREG_INIT_RATE: f64 = 50.0;
pub const LINREG_INIT_SCALE: f64 = 1.0;

/// How the non-reparameterizable blocks of a fit get their gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitVariant {
    /// Coupled finite differences.
    Vind,
    /// Finite differences from independent draws.
    VindUncoupled,
    /// Score function.
    Bbvi,
    /// Rao-Blackwellized score function.
    BbviRb,
}

impl FitVariant {
    fn method(self) -> BlockMethod {
        match self {
            FitVariant::Vind => BlockMethod::Vind,
            FitVariant::VindUncoupled => BlockMethod::VindUncoupled,
            FitVariant::Bbvi => BlockMethod::Bbvi,
            FitVariant::BbviRb => BlockMethod::BbviRb,
        }
    }
}

/// Finite-difference blocks get the variant's method, all other blocks
/// the pathwise gradient.
pub fn fit_plan(params: &VariationalParams, variant: FitVariant) -> EstimatorPlan {
    EstimatorPlan::by_kind(params, variant.method(), BlockMethod::Reparam)
}

/// Center and standardize each column, then rotate onto the principal axes.
pub fn decorrelate_features(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut z = x.clone();
    for j in 0..d {
        let col = x.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for i in 0..n {
            z[(i, j)] = (x[(i, j)] - mean) / sd;
        }
    }
    let cov = z.transpose() * &z / n as f64;
    let eig = SymmetricEigen::new(cov);
    // sort axes by decreasing variance so the output is reproducible
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = DMatrix::zeros(d, d);
    for (k, &j) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(j).into_owned();
        // fix the sign: largest-magnitude entry positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        basis.set_column(k, &v);
    }
    z * basis
}

/// Mean-field family `N(w; loc, diag(scale²)) × Γ(τ; shape, rate)`.
pub fn linreg_family(dim: usize) -> Result<FamilySpec> {
    FamilySpec::new(vec![
        Factor::new("w", FactorKind::GaussianDiag { dim, spherical: false }),
        Factor::new("tau", FactorKind::Gamma),
    ])
}

/// Cold start: `loc = 0`, `scale = 1`, `shape = 200`, `rate = 50`.
pub fn linreg_init(family: &FamilySpec, dim: usize, shape_epsilon: f64) -> Result<VariationalParams> {
    family
        .builder()
        .reparam("w.loc", DVector::zeros(dim))
        .reparam("w.scale", DVector::from_element(dim, LINREG_INIT_SCALE))
        .fd("tau.shape", LINREG_INIT_SHAPE, shape_epsilon)
        .reparam("tau.rate", LINREG_INIT_RATE)
        .build()
}

pub fn linreg_setup(data: LinRegData, shape_epsilon: f64) -> Result<(LinReg, FamilySpec, VariationalParams)> {
    let d = data.dim();
    let family = linreg_family(d)?;
    let init = linreg_init(&family, d, shape_epsilon)?;
    Ok((LinReg::new(data), family, init))
}

/// `N(μ; loc, scale² I) × W(Λ; df, C²) × Γ(ν; shape, rate)`.
pub fn student_family(dim: usize) -> Result<FamilySpec> {
    FamilySpec::new(vec![
        Factor::new("mu", FactorKind::GaussianDiag { dim, spherical: true }),
        Factor::new("lambda", FactorKind::Wishart { dim }),
        Factor::new("nu", FactorKind::Gamma),
    ])
}

/// Smallest Wishart df for which `df - ε` still exceeds `dim - 1`.
pub fn wishart_df_floor(dim: usize, epsilon: f64) -> f64 {
    dim as f64 - 1.0 + epsilon + DOMAIN_MARGIN
}

/// Prior values for every block except the Wishart scale, which is set so
/// that the mean of `q(Λ)` is the empirical precision. The df starts at the
/// prior df, raised to `d + ε` when needed: right at the two-sided floor the
/// minus draw has df barely above `d - 1` and is numerically singular.
pub fn student_init(
    family: &FamilySpec,
    data: &StudentWishartData,
    df_epsilon: f64,
    shape_epsilon: f64,
) -> Result<VariationalParams> {
    let d = data.dim();
    let df = data.p0.max(d as f64 + df_epsilon);
    let w = data.empirical_precision()? / df;
    family
        .builder()
        .reparam("mu.loc", DVector::zeros(d))
        .reparam("mu.scale", data.mu_prior_scale)
        .fd("lambda.df", df, df_epsilon)
        .reparam("lambda.scale_root", sqrt_spd(&w))
        .fd("nu.shape", data.a0, shape_epsilon)
        .reparam("nu.rate", data.b0)
        .build()
}

/// Default finite-difference steps: `2d` on the Wishart df, 1 on the shape.
pub fn student_setup(data: StudentWishartData) -> Result<(StudentWishart, FamilySpec, VariationalParams)> {
    let d = data.dim();
    let family = student_family(d)?;
    let init = student_init(&family, &data, 2.0 * d as f64, 1.0)?;
    Ok((StudentWishart::new(data), family, init))
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

fn heldout<F>(
    family: &FamilySpec,
    params: &VariationalParams,
    n_test: usize,
    stream: &mut RandomStream,
    n_draws: usize,
    point: F,
) -> Result<f64>
where
    F: Fn(&Theta, usize) -> f64,
{
    if n_test == 0 {
        return Err(Error::Contract("held-out set is empty".into()));
    }
    if n_draws == 0 {
        return Err(Error::Contract("need at least one posterior draw".into()));
    }
    let draws = sample_centers(family, params, stream, n_draws)?;
    let mut total = 0.0;
    let mut ll = vec![0.0; n_draws];
    for t in 0..n_test {
        for (l, d) in ll.iter_mut().zip(&draws) {
            *l = point(&d.center, t);
        }
        total -= log_mean_exp(&ll);
    }
    let loss = total / n_test as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Estimator {
            msg: format!("non-finite held-out log loss {loss}"),
            theta: String::new(),
        })
    }
}

/// Per-observation held-out log loss of the regression under the predictive
/// distribution approximated with `n_draws` draws from `q`.
pub fn linreg_heldout_log_loss(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n_draws: usize,
) -> Result<f64> {
    heldout(family, params, x.nrows(), stream, n_draws, |theta, t| {
        let (Some(w), Some(tau)) = (theta.get(0).vector(), theta.get(1).real()) else {
            return f64::NAN;
        };
        let row: Vec<f64> = x.row(t).iter().copied().collect();
        LinReg::log_likelihood_point(&row, y[t], w, tau)
    })
}

/// Per-observation held-out log loss of the Student model.
pub fn student_heldout_log_loss(
    x: &DMatrix<f64>,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n_draws: usize,
) -> Result<f64> {
    heldout(family, params, x.nrows(), stream, n_draws, |theta, t| {
        let (Some(mu), Some(lam), Some(nu)) = (theta.get(0).vector(), theta.get(1).matrix(), theta.get(2).real()) else {
            return f64::NAN;
        };
        let Some(ld) = ln_det_spd(lam) else {
            return f64::NAN;
        };
        let row: Vec<f64> = x.row(t).iter().copied().collect();
        StudentWishart::log_likelihood_point(&row, mu, lam, ld, nu)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decorrelated_features_are_white() {
        let mut s = RandomStream::new(3);
        let x = DMatrix::from_fn(200, 3, |i, j| {
            let z = crate::distributions::sample_std_normal(&mut s);
            z * (j as f64 + 1.0) + if j == 2 { i as f64 * 0.01 } else { 0.0 }
        });
        let z = decorrelate_features(&x);
        let cov = z.transpose() * &z / 200.0;
        for i in 0..3 {
            assert!(z.column(i).mean().abs() < 1e-12);
            for j in 0..3 {
                if i != j {
                    assert!(cov[(i, j)].abs() < 1e-10);
                }
            }
        }
        assert!(cov[(0, 0)] >= cov[(1, 1)] && cov[(1, 1)] >= cov[(2, 2)]);
    }

    #[test]
    fn student_init_respects_floor() {
        let mut s = RandomStream::new(4);
        let x = DMatrix::from_fn(30, 3, |_, _| crate::distributions::sample_std_normal(&mut s));
        let data = StudentWishartData::new(x).unwrap();
        let (_, fam, p) = student_setup(data).unwrap();
        let df = p.scalar("lambda.df").unwrap();
        assert_eq!(df, 9.0);
        assert!(df > wishart_df_floor(3, 6.0));
        assert!(p.block("lambda.df").unwrap().two_sided_valid());
        fam.validate(&p).unwrap();
    }

    #[test]
    fn log_mean_exp_stable() {
        assert!((log_mean_exp(&[-1000.0, -1000.0]) + 1000.0).abs() < 1e-12);
        assert!((log_mean_exp(&[0.0, 2f64.ln()]) - 1.5f64.ln()).abs() < 1e-12);
    }
}
