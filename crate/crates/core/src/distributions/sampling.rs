//! Base samplers: Gamma, chi-square, standard normal vectors, identity-scale
//! Wishart (Bartlett construction) and Poisson with its zero-truncated variant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{PsdMatrix, RandomStream};
use crate::error::{Error, Result};

fn positive(op: &'static str, name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(op, format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn sample_std_normal(stream: &mut RandomStream) -> f64 {
    stream.sample(StandardNormal)
}

/// Γ(shape, rate) draw, density ∝ θ^{shape-1} exp(-rate θ).
pub fn sample_gamma(stream: &mut RandomStream, shape: f64, rate: f64) -> Result<f64> {
    positive("sample_gamma", "shape", shape)?;
    positive("sample_gamma", "rate", rate)?;
    Ok(sample_unit_gamma(stream, shape) / rate)
}

/// Γ(shape, 1). Marsaglia–Tsang squeeze for shape >= 1; below 1 the
/// shape-boost identity Γ(a) = Γ(a + 1) · U^{1/a} keeps the draw exact for
/// arbitrarily small shapes. The boost is applied in log space so tiny shapes
/// underflow to zero only when the true value is below the smallest subnormal.
pub(crate) fn sample_unit_gamma(stream: &mut RandomStream, shape: f64) -> f64 {
    if shape < 1.0 {
        let g = marsaglia_tsang(stream, shape + 1.0);
        let u = stream.uniform_open();
        return (g.ln() + u.ln() / shape).exp();
    }
    marsaglia_tsang(stream, shape)
}

fn marsaglia_tsang(stream: &mut RandomStream, shape: f64) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = stream.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = stream.uniform_open();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// χ²_df draw; non-integer degrees of freedom are allowed.
pub fn sample_chi_square(stream: &mut RandomStream, df: f64) -> Result<f64> {
    positive("sample_chi_square", "df", df)?;
    Ok(2.0 * sample_unit_gamma(stream, df / 2.0))
}

/// Vector of `p` i.i.d. standard normals.
pub fn sample_std_normal_vec(stream: &mut RandomStream, p: usize) -> Result<DVector<f64>> {
    if p == 0 {
        return Err(Error::domain("sample_std_normal_vec", "dimension must be at least 1"));
    }
    Ok(DVector::from_fn(p, |_, _| stream.sample(StandardNormal)))
}

/// Draw from W(df, I_p) by the Bartlett decomposition.
///
/// Requires df > p - 1; the diagonal of the Bartlett factor uses χ²_{df - i}.
pub fn sample_wishart_identity(stream: &mut RandomStream, df: f64, p: usize) -> Result<PsdMatrix> {
    if p == 0 {
        return Err(Error::domain("sample_wishart_identity", "dimension must be at least 1"));
    }
    if !(df.is_finite() && df > p as f64 - 1.0) {
        return Err(Error::domain(
            "sample_wishart_identity",
            format!("degrees of freedom must satisfy df > p - 1 = {}, got {df}", p - 1),
        ));
    }
    Ok(wishart_identity_unchecked(stream, df, p))
}

pub(crate) fn wishart_identity_unchecked(stream: &mut RandomStream, df: f64, p: usize) -> PsdMatrix {
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        a[(i, i)] = (2.0 * sample_unit_gamma(stream, (df - i as f64) / 2.0)).sqrt();
        for j in 0..i {
            a[(i, j)] = stream.sample(StandardNormal);
        }
    }
    PsdMatrix::from_gram(&a * a.transpose())
}

/// Poisson(rate) count.
pub fn sample_poisson(stream: &mut RandomStream, rate: f64) -> Result<u64> {
    positive("sample_poisson", "rate", rate)?;
    Ok(poisson_unchecked(stream, rate))
}

pub(crate) fn poisson_unchecked(stream: &mut RandomStream, rate: f64) -> u64 {
    let dist = Poisson::new(rate).expect("validated rate");
    dist.sample(stream) as u64
}

/// Poisson(rate) conditioned on the count being at least one.
///
/// Small rates use inversion on the truncated mass function; once the zero
/// class is unlikely, rejection from the untruncated law is cheaper.
pub fn sample_poisson_positive(stream: &mut RandomStream, rate: f64) -> Result<u64> {
    positive("sample_poisson_positive", "rate", rate)?;
    Ok(poisson_positive_unchecked(stream, rate))
}

pub(crate) fn poisson_positive_unchecked(stream: &mut RandomStream, rate: f64) -> u64 {
    if rate > 1.0 {
        loop {
            let k = poisson_unchecked(stream, rate);
            if k > 0 {
                return k;
            }
        }
    }
    // P(K = k | K >= 1) = rate^k e^{-rate} / (k! (1 - e^{-rate}))
    let norm = -(-rate).exp_m1();
    let u = stream.uniform_open() * norm;
    let mut k = 1u64;
    let mut pmf = rate * (-rate).exp();
    let mut cdf = pmf;
    while u > cdf && pmf > 0.0 {
        k += 1;
        pmf *= rate / k as f64;
        cdf += pmf;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn gamma_mean() {
        let mut s = RandomStream::new(1);
        let xs: Vec<f64> = (0..1_000_000).map(|_| sample_gamma(&mut s, 3.0, 2.0).unwrap()).collect();
        let (m, v) = mean_var(&xs);
        assert!((m - 1.5).abs() < 0.01, "mean {m}");
        assert!((v - 0.75).abs() < 0.01, "var {v}");
    }

    #[test]
    fn gamma_small_shape_moments() {
        let mut s = RandomStream::new(2);
        for &a in &[0.5, 0.1, 0.01] {
            let n = 400_000;
            let xs: Vec<f64> = (0..n).map(|_| sample_gamma(&mut s, a, 1.0).unwrap()).collect();
            let (m, _) = mean_var(&xs);
            let se = (a / n as f64).sqrt();
            assert!((m - a).abs() < 5.0 * se, "shape {a}: mean {m}");
        }
    }

    #[test]
    fn gamma_rejects_bad_params() {
        let mut s = RandomStream::new(3);
        assert!(sample_gamma(&mut s, 0.0, 1.0).is_err());
        assert!(sample_gamma(&mut s, 1.0, -1.0).is_err());
        assert!(sample_chi_square(&mut s, 0.0).is_err());
        assert!(sample_poisson(&mut s, 0.0).is_err());
        assert!(sample_poisson_positive(&mut s, -2.0).is_err());
        assert!(sample_std_normal_vec(&mut s, 0).is_err());
    }

    #[test]
    fn chi_square_moments() {
        let mut s = RandomStream::new(4);
        let xs: Vec<f64> = (0..1_000_000).map(|_| sample_chi_square(&mut s, 4.0).unwrap()).collect();
        let (m, v) = mean_var(&xs);
        assert!((m - 4.0).abs() < 0.02);
        assert!((v - 8.0).abs() < 0.1);
    }

    #[test]
    fn normal_vec_moments() {
        let mut s = RandomStream::new(5);
        let n = 1_000_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut cross = 0.0;
        for _ in 0..n {
            let z = sample_std_normal_vec(&mut s, 3).unwrap();
            for i in 0..3 {
                sum[i] += z[i];
                sq[i] += z[i] * z[i];
            }
            cross += z[0] * z[1];
        }
        let nf = n as f64;
        for i in 0..3 {
            assert!((sum[i] / nf).abs() < 0.004);
            assert!((sq[i] / nf - 1.0).abs() < 0.01);
        }
        assert!((cross / nf).abs() < 0.01);
    }

    #[test]
    fn wishart_mean_and_validity() {
        let mut s = RandomStream::new(6);
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let w = sample_wishart_identity(&mut s, 10.0, 3).unwrap();
            acc += w.as_matrix();
        }
        acc /= n as f64;
        let expected = DMatrix::<f64>::identity(3, 3) * 10.0;
        assert!((acc - expected).amax() < 0.1);
        for _ in 0..1000 {
            let w = sample_wishart_identity(&mut s, 3.5, 3).unwrap();
            assert!(PsdMatrix::new(w.into_inner()).is_ok());
        }
    }

    #[test]
    fn wishart_rejects_low_df() {
        let mut s = RandomStream::new(7);
        let err = sample_wishart_identity(&mut s, 2.0, 3).unwrap_err();
        assert!(err.to_string().contains("df > p - 1"));
    }

    #[test]
    fn poisson_moments() {
        let mut s = RandomStream::new(8);
        let n = 1_000_000;
        let zeros = (0..n).filter(|_| sample_poisson(&mut s, 0.2).unwrap() == 0).count();
        assert!((zeros as f64 / n as f64 - (-0.2f64).exp()).abs() < 0.002);
        let xs: Vec<f64> = (0..n).map(|_| sample_poisson(&mut s, 3.0).unwrap() as f64).collect();
        let (m, v) = mean_var(&xs);
        assert!((m - 3.0).abs() < 0.01);
        assert!((v - 3.0).abs() < 0.02);
    }

    #[test]
    fn poisson_positive_mass_at_one() {
        let mut s = RandomStream::new(9);
        let n = 1_000_000;
        let ones = (0..n)
            .filter(|_| sample_poisson_positive(&mut s, 0.2).unwrap() == 1)
            .count();
        let expected = 0.2 * (-0.2f64).exp() / (1.0 - (-0.2f64).exp());
        assert!((ones as f64 / n as f64 - expected).abs() < 0.002);
    }

    #[test]
    fn poisson_positive_never_zero() {
        let mut s = RandomStream::new(10);
        for &rate in &[0.001, 0.2, 1.0, 5.0] {
            for _ in 0..2_500_000 {
                assert!(sample_poisson_positive(&mut s, rate).unwrap() >= 1);
            }
        }
    }
}
