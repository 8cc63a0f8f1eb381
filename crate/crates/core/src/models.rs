//! Target log-densities and the conjugate posterior used as ground truth.

use nalgebra::{DMatrix, DVector};

use crate::distributions::special::{digamma_unchecked as digamma, ln_gamma_unchecked as ln_gamma};
use crate::distributions::{
    inverse_spd, ln_det_spd, sample_std_normal, sample_std_normal_vec, sample_unit_gamma, sqrt_spd, RandomStream,
};
use crate::error::{Error, Result};
use crate::families::{FamilySpec, QDensity, Theta, ThetaValue, VariationalParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Unnormalized (or normalized) log-density over a [`Theta`] assembly.
pub trait TargetModel: Sync {
    fn log_density(&self, theta: &Theta) -> f64;

    /// `∇_θ log p`, when available. Matrix components use the symmetric
    /// convention: `⟨G, E⟩` is the directional derivative along symmetric `E`.
    fn grad_log_density(&self, _theta: &Theta) -> Option<Theta> {
        None
    }

    fn has_gradient(&self) -> bool {
        false
    }
}

fn gamma_log_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x
}

fn check_positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::domain("model", format!("{key} must be positive, got {v}")))
    }
}

fn check_finite<'a>(what: &str, it: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for (i, v) in it.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Data {
                row: None,
                column: None,
                msg: format!("{what} entry {i} is not finite"),
            });
        }
    }
    Ok(())
}

fn real(theta: &Theta, i: usize) -> f64 {
    theta.0.get(i).and_then(ThetaValue::real).unwrap_or(f64::NAN)
}

/// Observations `x_i ~ N(μ, 1/τ)` with a Gamma(α₀, β₀) prior on the precision.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaNormalData {
    pub x: Vec<f64>,
    pub mu: f64,
    pub alpha0: f64,
    pub beta0: f64,
}

impl GammaNormalData {
    pub fn new(x: Vec<f64>, mu: f64, alpha0: f64, beta0: f64) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Data {
                row: None,
                column: None,
                msg: "need at least one observation".into(),
            });
        }
        check_finite("x", &x)?;
        check_finite("mu", [&mu])?;
        check_positive("alpha0", alpha0)?;
        check_positive("beta0", beta0)?;
        Ok(GammaNormalData { x, mu, alpha0, beta0 })
    }

    pub fn sum_sq(&self) -> f64 {
        self.x.iter().map(|x| (x - self.mu).powi(2)).sum()
    }
}

/// Normalized log joint `Σ log N(x_i; μ, 1/τ) + log Γ(τ; α₀, β₀)`.
pub fn gamma_normal_log_density(data: &GammaNormalData, tau: f64) -> f64 {
    GammaNormal::new(data.clone()).log_joint(tau)
}

/// Conjugate posterior `(α₀ + n/2, β₀ + Σ(x_i - μ)²/2)`.
pub fn conjugate_posterior_gamma_normal(data: &GammaNormalData) -> (f64, f64) {
    (data.alpha0 + data.x.len() as f64 / 2.0, data.beta0 + data.sum_sq() / 2.0)
}

/// Gamma-Normal target over a single Gamma factor `θ = (τ)`.
#[derive(Clone, Debug)]
pub struct GammaNormal {
    data: GammaNormalData,
    n: f64,
    ss: f64,
}

impl GammaNormal {
    pub fn new(data: GammaNormalData) -> Self {
        let n = data.x.len() as f64;
        let ss = data.sum_sq();
        GammaNormal { data, n, ss }
    }

    pub fn data(&self) -> &GammaNormalData {
        &self.data
    }

    pub fn posterior(&self) -> (f64, f64) {
        conjugate_posterior_gamma_normal(&self.data)
    }

    pub fn log_joint(&self, tau: f64) -> f64 {
        if !(tau > 0.0) {
            return f64::NEG_INFINITY;
        }
        0.5 * self.n * (tau.ln() - LN_2PI) - 0.5 * tau * self.ss + gamma_log_pdf(tau, self.data.alpha0, self.data.beta0)
    }
}

impl TargetModel for GammaNormal {
    fn log_density(&self, theta: &Theta) -> f64 {
        self.log_joint(real(theta, 0))
    }

    fn grad_log_density(&self, theta: &Theta) -> Option<Theta> {
        let tau = real(theta, 0);
        let g = (0.5 * self.n + self.data.alpha0 - 1.0) / tau - 0.5 * self.ss - self.data.beta0;
        Some(Theta(vec![ThetaValue::Real(g)]))
    }

    fn has_gradient(&self) -> bool {
        true
    }
}

/// `n` draws from `N(0, 1/τ_true)` with prior (α₀, β₀) = (5, 5).
pub fn synth_gamma_normal(stream: &mut RandomStream, n: usize, tau_true: f64) -> Result<GammaNormalData> {
    check_positive("tau_true", tau_true)?;
    if n == 0 {
        return Err(Error::domain("synth_gamma_normal", "n must be at least 1"));
    }
    let sd = tau_true.powf(-0.5);
    let x = (0..n).map(|_| sd * sample_std_normal(stream)).collect();
    GammaNormalData::new(x, 0.0, 5.0, 5.0)
}

/// Bayesian linear regression data and priors.
#[derive(Clone, Debug, PartialEq)]
pub struct LinRegData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Prior variance of each weight.
    pub s0: f64,
    pub alpha0: f64,
    pub beta0: f64,
}

impl LinRegData {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, s0: f64, alpha0: f64, beta0: f64) -> Result<Self> {
        let (n, d) = x.shape();
        if d == 0 || n < d {
            return Err(Error::Data {
                row: None,
                column: None,
                msg: format!("need n >= d >= 1, got n = {n}, d = {d}"),
            });
        }
        if y.len() != n {
            return Err(Error::Data {
                row: None,
                column: None,
                msg: "targets and features have different row counts".into(),
            });
        }
        check_finite("x", x.iter())?;
        check_finite("y", y.iter())?;
        check_positive("s0", s0)?;
        check_positive("alpha0", alpha0)?;
        check_positive("beta0", beta0)?;
        Ok(LinRegData {
            x,
            y,
            s0,
            alpha0,
            beta0,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Prior on the regression weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WeightPrior {
    /// `w ~ N(0, s₀ I)` independent of `τ`.
    #[default]
    Independent,
    /// `w | τ ~ N(0, (s₀/τ) I)`, which makes the model conjugate.
    Hierarchical,
}

/// Linear regression target over `θ = (w, τ)`.
#[derive(Clone, Debug)]
pub struct LinReg {
    data: LinRegData,
    prior: WeightPrior,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
}

impl LinReg {
    pub fn new(data: LinRegData) -> Self {
        Self::with_prior(data, WeightPrior::Independent)
    }

    pub fn with_prior(data: LinRegData, prior: WeightPrior) -> Self {
        let xtx = data.x.transpose() * &data.x;
        let xty = data.x.transpose() * &data.y;
        let yty = data.y.norm_squared();
        LinReg {
            data,
            prior,
            xtx,
            xty,
            yty,
        }
    }

    pub fn data(&self) -> &LinRegData {
        &self.data
    }

    fn rss(&self, w: &DVector<f64>) -> f64 {
        (self.yty - 2.0 * w.dot(&self.xty) + w.dot(&(&self.xtx * w))).max(0.0)
    }

    pub fn log_joint(&self, w: &DVector<f64>, tau: f64) -> f64 {
        if !(tau > 0.0) || w.len() != self.data.dim() {
            return f64::NEG_INFINITY;
        }
        let n = self.data.n() as f64;
        let d = w.len() as f64;
        let lik = 0.5 * n * (tau.ln() - LN_2PI) - 0.5 * tau * self.rss(w);
        let prior_var = match self.prior {
            WeightPrior::Independent => self.data.s0,
            WeightPrior::Hierarchical => self.data.s0 / tau,
        };
        let w_prior = -0.5 * d * (LN_2PI + prior_var.ln()) - 0.5 * w.norm_squared() / prior_var;
        lik + w_prior + gamma_log_pdf(tau, self.data.alpha0, self.data.beta0)
    }

    /// `log N(y; xᵀw, 1/τ)` for one row.
    pub fn log_likelihood_point(x: &[f64], y: f64, w: &DVector<f64>, tau: f64) -> f64 {
        let mean: f64 = x.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        0.5 * (tau.ln() - LN_2PI) - 0.5 * tau * (y - mean).powi(2)
    }
}

/// Normalized log joint of the linear regression model with independent priors.
pub fn linreg_log_density(data: &LinRegData, w: &DVector<f64>, tau: f64) -> f64 {
    LinReg::new(data.clone()).log_joint(w, tau)
}

impl TargetModel for LinReg {
    fn log_density(&self, theta: &Theta) -> f64 {
        match theta.0.first().and_then(ThetaValue::vector) {
            Some(w) => self.log_joint(w, real(theta, 1)),
            None => f64::NAN,
        }
    }

    fn grad_log_density(&self, theta: &Theta) -> Option<Theta> {
        let w = theta.0.first()?.vector()?;
        let tau = theta.0.get(1)?.real()?;
        let n = self.data.n() as f64;
        let d = w.len() as f64;
        let resid_grad = &self.xty - &self.xtx * w;
        let rss = self.rss(w);
        let (gw, gtau_prior) = match self.prior {
            WeightPrior::Independent => (resid_grad * tau - w / self.data.s0, 0.0),
            WeightPrior::Hierarchical => (
                (resid_grad - w / self.data.s0) * tau,
                0.5 * d / tau - 0.5 * w.norm_squared() / self.data.s0,
            ),
        };
        let gtau = 0.5 * n / tau - 0.5 * rss + (self.data.alpha0 - 1.0) / tau - self.data.beta0 + gtau_prior;
        Some(Theta(vec![ThetaValue::Vector(gw), ThetaValue::Real(gtau)]))
    }

    fn has_gradient(&self) -> bool {
        true
    }
}

/// Gaussian features, standard normal weights and noise precision `tau_true`.
/// Priors are `s₀ = 1`, `α₀ = β₀ = 5`.
pub fn synth_linreg(stream: &mut RandomStream, n: usize, d: usize, tau_true: f64) -> Result<LinRegData> {
    check_positive("tau_true", tau_true)?;
    if d == 0 || n < d {
        return Err(Error::domain("synth_linreg", "need n >= d >= 1"));
    }
    let w = sample_std_normal_vec(stream, d)?;
    let x = DMatrix::from_fn(n, d, |_, _| sample_std_normal(stream));
    let sd = tau_true.powf(-0.5);
    let y = &x * &w + DVector::from_fn(n, |_, _| sd * sample_std_normal(stream));
    LinRegData::new(x, y, 1.0, 5.0, 5.0)
}

/// Returns data with priors for the Student likelihood model.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentWishartData {
    /// `n × d` matrix, one observation per row.
    pub x: DMatrix<f64>,
    /// Prior standard deviation of each coordinate of μ.
    pub mu_prior_scale: f64,
    /// Wishart prior scale `W₀` on the precision-like matrix.
    pub w0: DMatrix<f64>,
    /// Wishart prior degrees of freedom.
    pub p0: f64,
    /// Gamma prior shape on ν.
    pub a0: f64,
    /// Gamma prior rate on ν.
    pub b0: f64,
}

impl StudentWishartData {
    /// Data with the default priors: μ-scale 1, `W(d + 2, I/(d + 2))`, `Γ(3, 1)`.
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let d = x.ncols();
        let p0 = d as f64 + 2.0;
        Self::with_priors(x, 1.0, DMatrix::identity(d, d) / p0, p0, 3.0, 1.0)
    }

    pub fn with_priors(x: DMatrix<f64>, mu_prior_scale: f64, w0: DMatrix<f64>, p0: f64, a0: f64, b0: f64) -> Result<Self> {
        let (n, d) = x.shape();
        if d == 0 || n <= d {
            return Err(Error::Data {
                row: None,
                column: None,
                msg: format!("need n > d >= 1, got n = {n}, d = {d}"),
            });
        }
        check_finite("x", x.iter())?;
        check_positive("mu_prior_scale", mu_prior_scale)?;
        check_positive("a0", a0)?;
        check_positive("b0", b0)?;
        if w0.shape() != (d, d) || inverse_spd(&w0).is_none() {
            return Err(Error::domain("StudentWishartData", "W0 must be d x d positive definite"));
        }
        if !(p0 > d as f64 - 1.0) {
            return Err(Error::domain("StudentWishartData", "Wishart prior needs p0 > d - 1"));
        }
        Ok(StudentWishartData {
            x,
            mu_prior_scale,
            w0,
            p0,
            a0,
            b0,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Inverse of the (biased) empirical covariance.
    pub fn empirical_precision(&self) -> Result<DMatrix<f64>> {
        let n = self.n() as f64;
        let mean = self.x.row_mean();
        let centered = DMatrix::from_fn(self.n(), self.dim(), |i, j| self.x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / n;
        inverse_spd(&cov).ok_or_else(|| Error::domain("empirical_precision", "empirical covariance is singular"))
    }
}

/// Student likelihood with location μ, precision-like matrix Λ = Σ⁻¹ and
/// degrees of freedom ν, over `θ = (μ, Λ, ν)`.
///
/// The shape is `Σ = S²` with `S⁻² = Λ`, so for one point
/// `log T(x) = lnΓ((ν+d)/2) - lnΓ(ν/2) - (d/2) ln(νπ) + ½ ln|Λ| - ((ν+d)/2) ln(1 + rᵀΛr/ν)`.
#[derive(Clone, Debug)]
pub struct StudentWishart {
    data: StudentWishartData,
    w0_inv: DMatrix<f64>,
    w0_ln_det: f64,
}

impl StudentWishart {
    pub fn new(data: StudentWishartData) -> Self {
        let w0_inv = inverse_spd(&data.w0).expect("validated");
        let w0_ln_det = ln_det_spd(&data.w0).expect("validated");
        StudentWishart {
            data,
            w0_inv,
            w0_ln_det,
        }
    }

    pub fn data(&self) -> &StudentWishartData {
        &self.data
    }

    /// Log-likelihood of one observation.
    pub fn log_likelihood_point(x: &[f64], mu: &DVector<f64>, lambda: &DMatrix<f64>, ln_det_lambda: f64, nu: f64) -> f64 {
        let d = mu.len() as f64;
        let r = DVector::from_iterator(mu.len(), x.iter().zip(mu.iter()).map(|(a, b)| a - b));
        let q = r.dot(&(lambda * &r));
        ln_gamma(0.5 * (nu + d)) - ln_gamma(0.5 * nu) - 0.5 * d * (nu * std::f64::consts::PI).ln()
            + 0.5 * ln_det_lambda
            - 0.5 * (nu + d) * (q / nu).ln_1p()
    }

    /// Log joint; `-inf` outside the support.
    pub fn log_joint(&self, mu: &DVector<f64>, lambda: &DMatrix<f64>, nu: f64) -> f64 {
        let d = self.data.dim();
        if !(nu > 0.0) || mu.len() != d || lambda.shape() != (d, d) {
            return f64::NEG_INFINITY;
        }
        let Some(ln_det) = ln_det_spd(lambda) else {
            return f64::NEG_INFINITY;
        };
        let df = d as f64;
        let n = self.data.n() as f64;
        let mut quad = 0.0;
        for i in 0..self.data.n() {
            let r = self.data.x.row(i).transpose() - mu;
            quad += (r.dot(&(lambda * &r)) / nu).ln_1p();
        }
        let lik = n
            * (ln_gamma(0.5 * (nu + df)) - ln_gamma(0.5 * nu) - 0.5 * df * (nu * std::f64::consts::PI).ln()
                + 0.5 * ln_det)
            - 0.5 * (nu + df) * quad;
        let s2 = self.data.mu_prior_scale.powi(2);
        let mu_prior = -0.5 * df * (LN_2PI + s2.ln()) - 0.5 * mu.norm_squared() / s2;
        let p0 = self.data.p0;
        let w_prior = 0.5 * (p0 - df - 1.0) * ln_det - 0.5 * self.w0_inv.component_mul(lambda).sum()
            - 0.5 * p0 * df * std::f64::consts::LN_2
            - 0.5 * p0 * self.w0_ln_det
            - crate::distributions::special::ln_mv_gamma_unchecked(0.5 * p0, d);
        lik + mu_prior + w_prior + gamma_log_pdf(nu, self.data.a0, self.data.b0)
    }
}

/// Log joint of the Student model; errors when Λ is not positive definite.
pub fn student_wishart_log_density(
    data: &StudentWishartData,
    mu: &DVector<f64>,
    lambda: &DMatrix<f64>,
    nu: f64,
) -> Result<f64> {
    if lambda.shape() != (data.dim(), data.dim()) || ln_det_spd(lambda).is_none() {
        return Err(Error::domain("student_wishart_log_density", "precision matrix is not positive definite"));
    }
    if mu.len() != data.dim() {
        return Err(Error::domain("student_wishart_log_density", "location has the wrong dimension"));
    }
    Ok(StudentWishart::new(data.clone()).log_joint(mu, lambda, nu))
}

impl TargetModel for StudentWishart {
    fn log_density(&self, theta: &Theta) -> f64 {
        match (theta.0.first().and_then(ThetaValue::vector), theta.0.get(1).and_then(ThetaValue::matrix)) {
            (Some(mu), Some(lambda)) => self.log_joint(mu, lambda, real(theta, 2)),
            _ => f64::NAN,
        }
    }

    fn grad_log_density(&self, theta: &Theta) -> Option<Theta> {
        let mu = theta.0.first()?.vector()?;
        let lambda = theta.0.get(1)?.matrix()?;
        let nu = theta.0.get(2)?.real()?;
        let lambda_inv = inverse_spd(lambda)?;
        let d = mu.len();
        let df = d as f64;
        let n = self.data.n() as f64;
        let mut g_mu = DVector::zeros(d);
        let mut outer = DMatrix::zeros(d, d);
        let mut g_nu = n * (0.5 * digamma(0.5 * (nu + df)) - 0.5 * digamma(0.5 * nu) - 0.5 * df / nu);
        for i in 0..self.data.n() {
            let r = self.data.x.row(i).transpose() - mu;
            let lr = lambda * &r;
            let q = r.dot(&lr);
            let w = (nu + df) / (nu + q);
            g_mu += &lr * w;
            outer += &r * r.transpose() * (0.5 * w);
            g_nu += -0.5 * (q / nu).ln_1p() + 0.5 * (nu + df) * q / (nu * (nu + q));
        }
        g_mu -= mu / self.data.mu_prior_scale.powi(2);
        let g_lambda = &lambda_inv * (0.5 * (n + self.data.p0 - df - 1.0)) - outer - &self.w0_inv * 0.5;
        g_nu += (self.data.a0 - 1.0) / nu - self.data.b0;
        Some(Theta(vec![
            ThetaValue::Vector(g_mu),
            ThetaValue::Matrix(g_lambda),
            ThetaValue::Real(g_nu),
        ]))
    }

    fn has_gradient(&self) -> bool {
        true
    }
}

/// `n` draws `x = μ + S z / sqrt(c/ν)` with `S = Σ^{1/2}`, `c ~ χ²_ν`, and the
/// default priors.
pub fn synth_student(
    stream: &mut RandomStream,
    n: usize,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    nu: f64,
) -> Result<StudentWishartData> {
    let d = mu.len();
    check_positive("nu", nu)?;
    if sigma.shape() != (d, d) || inverse_spd(sigma).is_none() {
        return Err(Error::domain("synth_student", "sigma must be d x d positive definite"));
    }
    let s = sqrt_spd(sigma);
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let c = 2.0 * sample_unit_gamma(stream, nu / 2.0);
        let z = sample_std_normal_vec(stream, d)?;
        let xi = mu + &s * z / (c / nu).sqrt();
        x.set_row(i, &xi.transpose());
    }
    StudentWishartData::new(x)
}

/// Target defined by closures; useful for tests and small experiments.
pub struct FnTarget<F, G = fn(&Theta) -> Option<Theta>> {
    log_density: F,
    gradient: Option<G>,
}

impl<F> FnTarget<F>
where
    F: Fn(&Theta) -> f64 + Sync,
{
    pub fn new(log_density: F) -> Self {
        FnTarget {
            log_density,
            gradient: None,
        }
    }
}

impl<F, G> FnTarget<F, G>
where
    F: Fn(&Theta) -> f64 + Sync,
    G: Fn(&Theta) -> Option<Theta> + Sync,
{
    pub fn with_gradient(log_density: F, gradient: G) -> Self {
        FnTarget {
            log_density,
            gradient: Some(gradient),
        }
    }
}

impl<F, G> TargetModel for FnTarget<F, G>
where
    F: Fn(&Theta) -> f64 + Sync,
    G: Fn(&Theta) -> Option<Theta> + Sync,
{
    fn log_density(&self, theta: &Theta) -> f64 {
        (self.log_density)(theta)
    }

    fn grad_log_density(&self, theta: &Theta) -> Option<Theta> {
        self.gradient.as_ref().and_then(|g| g(theta))
    }

    fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }
}

/// A variational family used as its own target, so that `p = q`.
pub struct FamilyTarget {
    q: QDensity,
}

impl FamilyTarget {
    pub fn new(family: &FamilySpec, params: &VariationalParams) -> Result<Self> {
        Ok(FamilyTarget {
            q: QDensity::new(family, params)?,
        })
    }
}

impl TargetModel for FamilyTarget {
    fn log_density(&self, theta: &Theta) -> f64 {
        self.q.log_q(theta)
    }

    fn grad_log_density(&self, theta: &Theta) -> Option<Theta> {
        self.q.grad_theta(theta)
    }

    fn has_gradient(&self) -> bool {
        true
    }
}
