//! Normalized log-densities and log-mass functions.
//!
//! Points outside the support give `-inf`. Invalid or non-finite parameters,
//! and non-finite evaluation points, are domain errors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::matrix::{inverse_spd, ln_det_spd};
use super::special::{ln_gamma_unchecked, ln_mv_gamma_unchecked};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn finite(op: &'static str, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("{name} must be finite, got {v}")))
    }
}

fn positive(op: &'static str, name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(op, format!("{name} must be positive, got {v}")))
    }
}

fn all_finite<'a>(op: &'static str, name: &str, it: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if it.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(op, format!("{name} has non-finite entries")))
    }
}

/// Gamma(shape, rate) log-density.
pub fn log_pdf_gamma(theta: f64, shape: f64, rate: f64) -> Result<f64> {
    finite("log_pdf_gamma", "theta", theta)?;
    positive("log_pdf_gamma", "shape", shape)?;
    positive("log_pdf_gamma", "rate", rate)?;
    Ok(gamma_unchecked(theta, shape, rate))
}

pub(crate) fn gamma_unchecked(theta: f64, shape: f64, rate: f64) -> f64 {
    if theta <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma_unchecked(shape) + (shape - 1.0) * theta.ln() - rate * theta
}

/// Beta(a, b) log-density on (0, 1).
pub fn log_pdf_beta(theta: f64, a: f64, b: f64) -> Result<f64> {
    finite("log_pdf_beta", "theta", theta)?;
    positive("log_pdf_beta", "a", a)?;
    positive("log_pdf_beta", "b", b)?;
    Ok(beta_unchecked(theta, a, b))
}

pub(crate) fn beta_unchecked(theta: f64, a: f64, b: f64) -> f64 {
    if theta <= 0.0 || theta >= 1.0 {
        return f64::NEG_INFINITY;
    }
    ln_gamma_unchecked(a + b) - ln_gamma_unchecked(a) - ln_gamma_unchecked(b)
        + (a - 1.0) * theta.ln()
        + (b - 1.0) * (-theta).ln_1p()
}

/// Dirichlet(α) log-density on the simplex (coordinates sum to one within 1e-9).
pub fn log_pdf_dirichlet(theta: &DVector<f64>, alpha: &DVector<f64>) -> Result<f64> {
    if theta.len() != alpha.len() || alpha.len() < 2 {
        return Err(Error::domain(
            "log_pdf_dirichlet",
            "theta and alpha must have the same length >= 2",
        ));
    }
    all_finite("log_pdf_dirichlet", "theta", theta.iter())?;
    for &a in alpha.iter() {
        positive("log_pdf_dirichlet", "alpha", a)?;
    }
    Ok(dirichlet_unchecked(theta, alpha))
}

pub(crate) fn dirichlet_unchecked(theta: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    if theta.iter().any(|&t| t <= 0.0) || (theta.sum() - 1.0).abs() > 1e-9 {
        return f64::NEG_INFINITY;
    }
    let norm = ln_gamma_unchecked(alpha.sum()) - alpha.iter().map(|&a| ln_gamma_unchecked(a)).sum::<f64>();
    norm + theta
        .iter()
        .zip(alpha.iter())
        .map(|(t, a)| (a - 1.0) * t.ln())
        .sum::<f64>()
}

/// Diagonal Gaussian log-density; `sd` holds standard deviations.
pub fn log_pdf_normal_diag(theta: &DVector<f64>, mean: &DVector<f64>, sd: &DVector<f64>) -> Result<f64> {
    if theta.len() != mean.len() || mean.len() != sd.len() {
        return Err(Error::domain("log_pdf_normal_diag", "dimension mismatch"));
    }
    all_finite("log_pdf_normal_diag", "theta", theta.iter())?;
    all_finite("log_pdf_normal_diag", "mean", mean.iter())?;
    for &s in sd.iter() {
        positive("log_pdf_normal_diag", "sd", s)?;
    }
    Ok(normal_diag_unchecked(theta.iter(), mean.iter(), sd.iter()))
}

pub(crate) fn normal_diag_unchecked<'a>(
    theta: impl Iterator<Item = &'a f64>,
    mean: impl Iterator<Item = &'a f64>,
    sd: impl Iterator<Item = &'a f64>,
) -> f64 {
    theta
        .zip(mean)
        .zip(sd)
        .map(|((t, m), s)| {
            let z = (t - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * z * z
        })
        .sum()
}

/// Wishart W(df, V) log-density over symmetric positive definite `s`.
pub fn log_pdf_wishart(s: &DMatrix<f64>, df: f64, v: &DMatrix<f64>) -> Result<f64> {
    let p = v.nrows();
    if !v.is_square() || s.shape() != v.shape() || p == 0 {
        return Err(Error::domain("log_pdf_wishart", "matrices must be square with equal shape"));
    }
    all_finite("log_pdf_wishart", "S", s.iter())?;
    all_finite("log_pdf_wishart", "V", v.iter())?;
    if !(df.is_finite() && df > p as f64 - 1.0) {
        return Err(Error::domain(
            "log_pdf_wishart",
            format!("degrees of freedom must satisfy df > p - 1, got {df}"),
        ));
    }
    let v_inv = inverse_spd(v).ok_or_else(|| Error::domain("log_pdf_wishart", "V must be positive definite"))?;
    let ln_det_v = ln_det_spd(v).expect("cholesky succeeded above");
    Ok(wishart_unchecked(s, df, &v_inv, ln_det_v))
}

/// Wishart log-density with the scale supplied as its inverse and log det.
pub(crate) fn wishart_unchecked(s: &DMatrix<f64>, df: f64, v_inv: &DMatrix<f64>, ln_det_v: f64) -> f64 {
    let p = s.nrows() as f64;
    let Some(ln_det_s) = ln_det_spd(s) else {
        return f64::NEG_INFINITY;
    };
    let tr = v_inv.component_mul(s).sum();
    0.5 * (df - p - 1.0) * ln_det_s - 0.5 * tr
        - 0.5 * df * p * std::f64::consts::LN_2
        - 0.5 * df * ln_det_v
        - ln_mv_gamma_unchecked(0.5 * df, s.nrows())
}

/// Multivariate Student log-density with location `mu`, symmetric scale `s`
/// (covariance-like shape `s * s`) and `df` degrees of freedom.
pub fn log_pdf_student_mv(theta: &DVector<f64>, df: f64, mu: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let p = mu.len();
    if theta.len() != p || s.shape() != (p, p) || p == 0 {
        return Err(Error::domain("log_pdf_student_mv", "dimension mismatch"));
    }
    all_finite("log_pdf_student_mv", "theta", theta.iter())?;
    all_finite("log_pdf_student_mv", "mu", mu.iter())?;
    positive("log_pdf_student_mv", "df", df)?;
    let lu = s.clone().lu();
    let det = lu.determinant();
    if !(det.is_finite() && det != 0.0) {
        return Err(Error::domain("log_pdf_student_mv", "scale matrix is singular"));
    }
    let s_inv = lu.try_inverse().expect("non-singular");
    Ok(student_mv_unchecked(theta, df, mu, &s_inv, det.abs().ln()))
}

pub(crate) fn student_mv_unchecked(
    theta: &DVector<f64>,
    df: f64,
    mu: &DVector<f64>,
    s_inv: &DMatrix<f64>,
    ln_abs_det_s: f64,
) -> f64 {
    let p = mu.len() as f64;
    let a = s_inv * (theta - mu);
    let delta = a.norm_squared();
    ln_gamma_unchecked(0.5 * (df + p)) - ln_gamma_unchecked(0.5 * df) - 0.5 * p * (df * PI).ln() - ln_abs_det_s
        - 0.5 * (df + p) * (delta / df).ln_1p()
}

/// Poisson(rate) log-mass.
pub fn log_pmf_poisson(k: u64, rate: f64) -> Result<f64> {
    positive("log_pmf_poisson", "rate", rate)?;
    Ok(poisson_unchecked(k, rate))
}

pub(crate) fn poisson_unchecked(k: u64, rate: f64) -> f64 {
    let kf = k as f64;
    kf * rate.ln() - rate - ln_gamma_unchecked(kf + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn point_values() {
        assert!((log_pdf_gamma(1.0, 1.0, 1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!((log_pmf_poisson(0, 2.7).unwrap() + 2.7).abs() < 1e-15);
        let one = DVector::from_element(1, 0.0);
        let s = DMatrix::from_element(1, 1, 1.0);
        let v = log_pdf_student_mv(&one, 3.0, &one, &s).unwrap();
        // log Γ(2) - log Γ(3/2) - ½ log(3π)
        assert!((v + 1.0008888496235097).abs() < 1e-12, "{v}");
    }

    #[test]
    fn out_of_support_is_neg_inf() {
        assert_eq!(log_pdf_gamma(-1.0, 2.0, 1.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(log_pdf_beta(1.5, 2.0, 1.0).unwrap(), f64::NEG_INFINITY);
        let t = DVector::from_vec(vec![0.5, 0.6]);
        let a = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(log_pdf_dirichlet(&t, &a).unwrap(), f64::NEG_INFINITY);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(
            log_pdf_wishart(&bad, 3.0, &DMatrix::identity(2, 2)).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn invalid_inputs_are_errors() {
        assert!(log_pdf_gamma(f64::NAN, 1.0, 1.0).is_err());
        assert!(log_pdf_gamma(1.0, 0.0, 1.0).is_err());
        assert!(log_pdf_beta(0.5, 1.0, f64::INFINITY).is_err());
        assert!(log_pmf_poisson(3, -1.0).is_err());
        let i = DMatrix::identity(2, 2);
        assert!(log_pdf_wishart(&i, 0.5, &i).is_err());
    }

    #[test]
    fn one_dimensional_densities_integrate_to_one() {
        let g = simpson(|x| log_pdf_gamma(x, 2.5, 1.3).unwrap().exp(), 1e-12, 60.0, 200_000);
        assert!((g - 1.0).abs() < 1e-6, "{g}");
        let b = simpson(|x| log_pdf_beta(x, 2.0, 3.5).unwrap().exp(), 1e-12, 1.0 - 1e-12, 200_000);
        assert!((b - 1.0).abs() < 1e-6, "{b}");
        let m = DVector::from_element(1, 0.3);
        let sd = DVector::from_element(1, 0.7);
        let n = simpson(
            |x| log_pdf_normal_diag(&DVector::from_element(1, x), &m, &sd).unwrap().exp(),
            -15.0,
            15.0,
            200_000,
        );
        assert!((n - 1.0).abs() < 1e-6);
        let s = DMatrix::from_element(1, 1, 1.7);
        let t = simpson(
            |x| log_pdf_student_mv(&DVector::from_element(1, x), 4.0, &m, &s).unwrap().exp(),
            -4000.0,
            4000.0,
            2_000_000,
        );
        assert!((t - 1.0).abs() < 1e-6, "{t}");
        let w = simpson(
            |x| log_pdf_wishart(&DMatrix::from_element(1, 1, x), 5.0, &DMatrix::from_element(1, 1, 0.8)).unwrap().exp(),
            1e-12,
            200.0,
            400_000,
        );
        assert!((w - 1.0).abs() < 1e-6, "{w}");
        let p: f64 = (0..200).map(|k| log_pmf_poisson(k, 7.5).unwrap().exp()).sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wishart_one_dim_is_gamma() {
        for &(x, d, v) in &[(1.3, 4.0, 0.5), (0.2, 1.5, 2.0), (8.0, 10.0, 1.0)] {
            let w = log_pdf_wishart(&DMatrix::from_element(1, 1, x), d, &DMatrix::from_element(1, 1, v)).unwrap();
            let g = log_pdf_gamma(x, d / 2.0, 1.0 / (2.0 * v)).unwrap();
            assert!((w - g).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_is_two_dim_dirichlet() {
        let a = DVector::from_vec(vec![2.2, 0.7]);
        for &x in &[0.1, 0.5, 0.93] {
            let d = log_pdf_dirichlet(&DVector::from_vec(vec![x, 1.0 - x]), &a).unwrap();
            let b = log_pdf_beta(x, 2.2, 0.7).unwrap();
            assert!((d - b).abs() < 1e-12);
        }
    }
}
