//! Coupled joint draws `(θ_{λ-ε}, θ_λ, θ_{λ+ε})` for the families whose
//! parameters cannot be reparameterized.
//!
//! Every construction exploits an additivity property (sums of Gammas, of
//! Wisharts, of chi-squares, of Poissons): the minus draw is built from a core
//! variable and the centre and plus draws add independent increments to it.
//! The base randomness that reparameterized parameters need is returned
//! alongside the triple.

use nalgebra::{DMatrix, DVector};

use crate::distributions::{
    poisson_positive_unchecked, sample_poisson_unchecked, sample_std_normal_vec, sample_unit_gamma,
    wishart_identity_unchecked, PsdMatrix, RandomStream,
};
use crate::error::{Error, Result};

/// Finite-difference stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(λ+ε) - f(λ-ε)) / 2ε`
    #[default]
    Central,
    /// `(f(λ+ε) - f(λ)) / ε`, used when `λ - ε` leaves the parameter space.
    /// The triple's `minus` then equals its `center`.
    Forward,
}

impl Stencil {
    pub fn divisor(self, epsilon: f64) -> f64 {
        match self {
            Stencil::Central => 2.0 * epsilon,
            Stencil::Forward => epsilon,
        }
    }

    /// Total parameter shift between the `minus` and `plus` draws, in units of ε.
    pub fn span(self) -> f64 {
        match self {
            Stencil::Central => 2.0,
            Stencil::Forward => 1.0,
        }
    }
}

/// A joint draw at `λ - ε`, `λ` and `λ + ε` for one perturbed parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledTriple<T> {
    pub minus: T,
    pub center: T,
    pub plus: T,
    pub epsilon: f64,
    pub param_id: &'static str,
    pub stencil: Stencil,
}

impl<T> CoupledTriple<T> {
    pub fn divisor(&self) -> f64 {
        self.stencil.divisor(self.epsilon)
    }

    pub fn map<U>(self, f: impl Fn(T) -> U) -> CoupledTriple<U> {
        CoupledTriple {
            minus: f(self.minus),
            center: f(self.center),
            plus: f(self.plus),
            epsilon: self.epsilon,
            param_id: self.param_id,
            stencil: self.stencil,
        }
    }
}

/// Unit-scale Gamma pieces of the shape coupling.
///
/// Central stencil: `gamma_core ~ Γ(α-ε)`, `inc1, inc2 ~ Γ(ε)`.
/// Forward stencil: `gamma_core ~ Γ(α)`, `inc1 = 0`, `inc2 ~ Γ(ε)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaBase {
    pub gamma_core: f64,
    pub inc1: f64,
    pub inc2: f64,
}

impl GammaBase {
    /// The unit-scale Gamma behind the centre draw, `Γ(α, 1)`.
    pub fn center_sum(&self) -> f64 {
        self.gamma_core + self.inc1
    }
}

fn check_eps(op: &'static str, eps: f64) -> Result<()> {
    if eps.is_finite() && eps > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(op, format!("epsilon must be positive, got {eps}")))
    }
}

fn check_positive(op: &'static str, name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(op, format!("{name} must be positive, got {v}")))
    }
}

fn check_shift(param: &'static str, value: f64, eps: f64, stencil: Stencil) -> Result<()> {
    if stencil == Stencil::Central && value <= eps {
        return Err(Error::boundary(
            param,
            format!("{param} = {value} must exceed epsilon = {eps} for a central difference"),
        ));
    }
    Ok(())
}

/// Split a unit Gamma of the given shape into (core, inc1, inc2) per the stencil.
fn split_gamma(stream: &mut RandomStream, shape: f64, eps: f64, stencil: Stencil) -> GammaBase {
    match stencil {
        Stencil::Central => GammaBase {
            gamma_core: sample_unit_gamma(stream, shape - eps),
            inc1: sample_unit_gamma(stream, eps),
            inc2: sample_unit_gamma(stream, eps),
        },
        Stencil::Forward => GammaBase {
            gamma_core: sample_unit_gamma(stream, shape),
            inc1: 0.0,
            inc2: sample_unit_gamma(stream, eps),
        },
    }
}

/// Gamma(α, β) coupling in the shape `α`, reparameterized in the rate `β`.
pub fn couple_gamma(
    stream: &mut RandomStream,
    alpha: f64,
    beta: f64,
    eps: f64,
) -> Result<(CoupledTriple<f64>, GammaBase)> {
    couple_gamma_with(stream, alpha, beta, eps, Stencil::Central)
}

pub fn couple_gamma_with(
    stream: &mut RandomStream,
    alpha: f64,
    beta: f64,
    eps: f64,
    stencil: Stencil,
) -> Result<(CoupledTriple<f64>, GammaBase)> {
    check_eps("couple_gamma", eps)?;
    check_positive("couple_gamma", "alpha", alpha)?;
    check_positive("couple_gamma", "beta", beta)?;
    check_shift("shape", alpha, eps, stencil)?;
    let base = split_gamma(stream, alpha, eps, stencil);
    let center = base.center_sum() / beta;
    let minus = match stencil {
        Stencil::Central => base.gamma_core / beta,
        Stencil::Forward => center,
    };
    let plus = (base.center_sum() + base.inc2) / beta;
    Ok((
        CoupledTriple {
            minus,
            center,
            plus,
            epsilon: eps,
            param_id: "shape",
            stencil,
        },
        base,
    ))
}

/// Beta(α, β) coupling in both parameters, built from four shared Gammas.
///
/// Returns the α-direction triple and the β-direction triple; both share the
/// same centre draw.
pub fn couple_beta(
    stream: &mut RandomStream,
    alpha: f64,
    beta: f64,
    eps: f64,
) -> Result<(CoupledTriple<f64>, CoupledTriple<f64>)> {
    couple_beta_with(stream, alpha, beta, (eps, Stencil::Central), (eps, Stencil::Central))
}

pub fn couple_beta_with(
    stream: &mut RandomStream,
    alpha: f64,
    beta: f64,
    (eps_a, stencil_a): (f64, Stencil),
    (eps_b, stencil_b): (f64, Stencil),
) -> Result<(CoupledTriple<f64>, CoupledTriple<f64>)> {
    check_eps("couple_beta", eps_a)?;
    check_eps("couple_beta", eps_b)?;
    check_positive("couple_beta", "alpha", alpha)?;
    check_positive("couple_beta", "beta", beta)?;
    check_shift("alpha", alpha, eps_a, stencil_a)?;
    check_shift("beta", beta, eps_b, stencil_b)?;
    let ga = split_gamma(stream, alpha, eps_a, stencil_a);
    let gb = split_gamma(stream, beta, eps_b, stencil_b);
    let (g_alpha, g_beta) = (ga.center_sum(), gb.center_sum());
    let center = g_alpha / (g_alpha + g_beta);

    let g_alpha_plus = g_alpha + ga.inc2;
    let g_alpha_minus = match stencil_a {
        Stencil::Central => ga.gamma_core,
        Stencil::Forward => g_alpha,
    };
    let g_beta_plus = g_beta + gb.inc2;
    let g_beta_minus = match stencil_b {
        Stencil::Central => gb.gamma_core,
        Stencil::Forward => g_beta,
    };
    let a_dir = CoupledTriple {
        minus: g_alpha_minus / (g_alpha_minus + g_beta),
        center,
        plus: g_alpha_plus / (g_alpha_plus + g_beta),
        epsilon: eps_a,
        param_id: "alpha",
        stencil: stencil_a,
    };
    let b_dir = CoupledTriple {
        minus: g_alpha / (g_alpha + g_beta_minus),
        center,
        plus: g_alpha / (g_alpha + g_beta_plus),
        epsilon: eps_b,
        param_id: "beta",
        stencil: stencil_b,
    };
    Ok((a_dir, b_dir))
}

/// Dirichlet coupling: the centre draw and, for every coordinate `j`, the
/// pair of simplex vectors with `α_j` shifted down and up.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletCoupling {
    pub center: DVector<f64>,
    pub pairs: Vec<(DVector<f64>, DVector<f64>)>,
    pub epsilon: f64,
    pub stencil: Stencil,
}

pub fn couple_dirichlet(stream: &mut RandomStream, alpha: &DVector<f64>, eps: f64) -> Result<DirichletCoupling> {
    couple_dirichlet_with(stream, alpha, eps, Stencil::Central)
}

pub fn couple_dirichlet_with(
    stream: &mut RandomStream,
    alpha: &DVector<f64>,
    eps: f64,
    stencil: Stencil,
) -> Result<DirichletCoupling> {
    check_eps("couple_dirichlet", eps)?;
    if alpha.len() < 2 {
        return Err(Error::domain("couple_dirichlet", "need at least two coordinates"));
    }
    for &a in alpha.iter() {
        check_positive("couple_dirichlet", "alpha", a)?;
        check_shift("concentration", a, eps, stencil)?;
    }
    let bases: Vec<GammaBase> = alpha.iter().map(|&a| split_gamma(stream, a, eps, stencil)).collect();
    let centers = DVector::from_iterator(bases.len(), bases.iter().map(GammaBase::center_sum));
    let total = centers.sum();
    let center = &centers / total;
    let pairs = bases
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let up = b.center_sum() + b.inc2;
            let down = match stencil {
                Stencil::Central => b.gamma_core,
                Stencil::Forward => b.center_sum(),
            };
            let replace = |gj: f64| {
                let mut v = centers.clone();
                v[j] = gj;
                let s = total - centers[j] + gj;
                v / s
            };
            (replace(down), replace(up))
        })
        .collect();
    Ok(DirichletCoupling {
        center,
        pairs,
        epsilon: eps,
        stencil,
    })
}

/// Unit-scale Wishart behind the centre draw, `W₁ + W₂ ~ W(d, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WishartBase {
    pub w_center: DMatrix<f64>,
}

/// Wishart W(d, V) coupling in the degrees of freedom, with `V = C²`.
pub fn couple_wishart(
    stream: &mut RandomStream,
    d: f64,
    c: &DMatrix<f64>,
    eps: f64,
) -> Result<(CoupledTriple<PsdMatrix>, WishartBase)> {
    couple_wishart_with(stream, d, c, eps, Stencil::Central)
}

pub fn couple_wishart_with(
    stream: &mut RandomStream,
    d: f64,
    c: &DMatrix<f64>,
    eps: f64,
    stencil: Stencil,
) -> Result<(CoupledTriple<PsdMatrix>, WishartBase)> {
    check_eps("couple_wishart", eps)?;
    let p = c.nrows();
    if !c.is_square() || p == 0 {
        return Err(Error::domain("couple_wishart", "scale root must be square and non-empty"));
    }
    let pm1 = p as f64 - 1.0;
    if eps <= pm1 {
        return Err(Error::boundary(
            "df",
            format!("Wishart increments need epsilon > p - 1 = {pm1}, got epsilon = {eps}"),
        ));
    }
    let core_df = match stencil {
        Stencil::Central => d - eps,
        Stencil::Forward => d,
    };
    if !(core_df > pm1) {
        return Err(Error::boundary(
            "df",
            format!("degrees of freedom d = {d} leave d - epsilon <= p - 1 = {pm1}"),
        ));
    }
    let w1 = wishart_identity_unchecked(stream, core_df, p).into_inner();
    let w_center = match stencil {
        Stencil::Central => &w1 + wishart_identity_unchecked(stream, eps, p).into_inner(),
        Stencil::Forward => w1.clone(),
    };
    let w_plus = &w_center + wishart_identity_unchecked(stream, eps, p).into_inner();
    let sandwich = |w: &DMatrix<f64>| PsdMatrix::from_gram(c * w * c);
    let triple = CoupledTriple {
        minus: sandwich(&w1),
        center: sandwich(&w_center),
        plus: sandwich(&w_plus),
        epsilon: eps,
        param_id: "df",
        stencil,
    };
    Ok((triple, WishartBase { w_center }))
}

/// How the shifted Student draws normalize their chi-square sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentNormalization {
    /// Divide every chi-square sum by the centre `d`. The shifted components
    /// are then Student(d ± ε) with scale `S·sqrt(d / (d ± ε))` rather than
    /// `S`, so their marginals are not the family at `d ± ε`. The radial
    /// ordering `‖plus - μ‖ ≤ ‖minus - μ‖` holds draw by draw.
    #[default]
    FixedDf,
    /// Divide each chi-square sum by its own degrees of freedom `d ± ε`, so
    /// every component has the Student marginal at its parameter. Variational
    /// families use this one.
    ShiftedDf,
}

/// Base randomness of the Student coupling: the Gaussian direction and the
/// chi-square sum behind the centre draw.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentBase {
    pub z: DVector<f64>,
    pub c_center: f64,
}

impl StudentBase {
    /// Standardized centre offset `u = z / sqrt(c / d)`, so `θ = μ + S u`.
    pub fn offset(&self, d: f64) -> DVector<f64> {
        &self.z / (self.c_center / d).sqrt()
    }
}

/// Multivariate Student coupling in the degrees of freedom `d`, with every
/// chi-square sum divided by `d` (see [`StudentNormalization::FixedDf`]).
pub fn couple_student_mv(
    stream: &mut RandomStream,
    d: f64,
    mu: &DVector<f64>,
    s: &DMatrix<f64>,
    eps: f64,
) -> Result<(CoupledTriple<DVector<f64>>, StudentBase)> {
    couple_student_mv_with(stream, d, mu, s, eps, Stencil::Central, StudentNormalization::FixedDf)
}

pub fn couple_student_mv_with(
    stream: &mut RandomStream,
    d: f64,
    mu: &DVector<f64>,
    s: &DMatrix<f64>,
    eps: f64,
    stencil: Stencil,
    normalization: StudentNormalization,
) -> Result<(CoupledTriple<DVector<f64>>, StudentBase)> {
    check_eps("couple_student_mv", eps)?;
    check_positive("couple_student_mv", "d", d)?;
    let p = mu.len();
    if s.shape() != (p, p) || p == 0 {
        return Err(Error::domain("couple_student_mv", "dimension mismatch"));
    }
    check_shift("df", d, eps, stencil)?;
    let base = split_gamma(stream, d / 2.0, eps / 2.0, stencil);
    let c_center = 2.0 * base.center_sum();
    let c_plus = c_center + 2.0 * base.inc2;
    let c_minus = match stencil {
        Stencil::Central => 2.0 * base.gamma_core,
        Stencil::Forward => c_center,
    };
    let z = sample_std_normal_vec(stream, p)?;
    let sz = s * &z;
    let (d_minus, d_plus) = match (normalization, stencil) {
        (StudentNormalization::FixedDf, _) => (d, d),
        (StudentNormalization::ShiftedDf, Stencil::Central) => (d - eps, d + eps),
        (StudentNormalization::ShiftedDf, Stencil::Forward) => (d, d + eps),
    };
    let at = |c: f64, dd: f64| mu + &sz / (c / dd).sqrt();
    let triple = CoupledTriple {
        minus: at(c_minus, d_minus),
        center: at(c_center, d),
        plus: at(c_plus, d_plus),
        epsilon: eps,
        param_id: "df",
        stencil,
    };
    Ok((triple, StudentBase { z, c_center }))
}

/// Poisson coupling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoissonMode {
    /// Condition the increment on being non-zero and reweight.
    #[default]
    Conditioned,
    /// Plain additive coupling; most draws give a zero difference.
    Naive,
}

/// One Poisson coupled draw.
///
/// In conditioned mode `weight = (1 - e^{-2ε}) / (2ε)` (forward stencil:
/// `(1 - e^{-ε}) / ε`) and already contains the divisor: the gradient is
/// `weight · mean(lr₊ - lr₋)`. In naive mode `weight = 1` and the usual
/// divisor applies. [`PoissonCoupling::mass_factor`] expresses both cases as
/// a factor in front of `(lr₊ - lr₋) / divisor`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonCoupling {
    pub triple: CoupledTriple<u64>,
    pub weight: f64,
    pub mode: PoissonMode,
}

impl PoissonCoupling {
    pub fn k_minus(&self) -> u64 {
        self.triple.minus
    }

    pub fn k_plus(&self) -> u64 {
        self.triple.plus
    }

    /// Probability that the increment is non-zero in conditioned mode, `1` in
    /// naive mode; multiplies `(lr₊ - lr₋) / divisor`.
    pub fn mass_factor(&self) -> f64 {
        match self.mode {
            PoissonMode::Conditioned => self.weight * self.triple.divisor(),
            PoissonMode::Naive => 1.0,
        }
    }
}

pub fn couple_poisson(stream: &mut RandomStream, lambda: f64, eps: f64, mode: PoissonMode) -> Result<PoissonCoupling> {
    couple_poisson_with(stream, lambda, eps, mode, Stencil::Central)
}

pub fn couple_poisson_with(
    stream: &mut RandomStream,
    lambda: f64,
    eps: f64,
    mode: PoissonMode,
    stencil: Stencil,
) -> Result<PoissonCoupling> {
    check_eps("couple_poisson", eps)?;
    check_positive("couple_poisson", "lambda", lambda)?;
    check_shift("rate", lambda, eps, stencil)?;
    let span = stencil.span() * eps;
    let (k_minus, k_center, increment) = match (stencil, mode) {
        (Stencil::Central, PoissonMode::Naive) => {
            let km = sample_poisson_unchecked(stream, lambda - eps);
            let inc = sample_poisson_unchecked(stream, span);
            // binomial thinning splits the increment into two Poisson(ε) halves
            let half = (0..inc).filter(|_| stream.uniform() < 0.5).count() as u64;
            (km, km + half, inc)
        }
        (Stencil::Central, PoissonMode::Conditioned) => {
            let km = sample_poisson_unchecked(stream, lambda - eps);
            let kc = km + sample_poisson_unchecked(stream, eps);
            (km, kc, poisson_positive_unchecked(stream, span))
        }
        (Stencil::Forward, PoissonMode::Naive) => {
            let kc = sample_poisson_unchecked(stream, lambda);
            (kc, kc, sample_poisson_unchecked(stream, span))
        }
        (Stencil::Forward, PoissonMode::Conditioned) => {
            let kc = sample_poisson_unchecked(stream, lambda);
            (kc, kc, poisson_positive_unchecked(stream, span))
        }
    };
    let weight = match mode {
        PoissonMode::Conditioned => -(-span).exp_m1() / span,
        PoissonMode::Naive => 1.0,
    };
    Ok(PoissonCoupling {
        triple: CoupledTriple {
            minus: k_minus,
            center: k_center,
            plus: k_minus + increment,
            epsilon: eps,
            param_id: "rate",
            stencil,
        },
        weight,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_ordering_and_center_mean() {
        let mut s = RandomStream::new(1);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let (t, base) = couple_gamma(&mut s, 3.0, 2.0, 0.5).unwrap();
            assert!(t.minus <= t.center && t.center <= t.plus);
            assert!(base.gamma_core > 0.0 && base.inc1 > 0.0 && base.inc2 > 0.0);
            sum += t.center;
        }
        assert!((sum / n as f64 - 1.5).abs() < 0.02);
    }

    #[test]
    fn gamma_boundary() {
        let mut s = RandomStream::new(2);
        let err = couple_gamma(&mut s, 0.5, 1.0, 0.5).unwrap_err();
        assert!(matches!(err, Error::Boundary { .. }));
        assert!(err.to_string().contains("one-sided"));
        let (t, _) = couple_gamma_with(&mut s, 0.5, 1.0, 0.5, Stencil::Forward).unwrap();
        assert_eq!(t.minus, t.center);
        assert!(t.plus >= t.center);
        assert_eq!(t.divisor(), 0.5);
    }

    #[test]
    fn beta_orderings() {
        let mut s = RandomStream::new(3);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let (a, b) = couple_beta(&mut s, 2.0, 2.0, 0.25).unwrap();
            assert!(a.minus <= a.center && a.center <= a.plus);
            assert!(b.plus <= b.center && b.center <= b.minus);
            assert_eq!(a.center, b.center);
            sum += a.center;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.005);
        assert!(matches!(couple_beta(&mut s, 2.0, 0.2, 0.25), Err(Error::Boundary { .. })));
    }

    #[test]
    fn dirichlet_simplex_and_ordering() {
        let mut s = RandomStream::new(4);
        let alpha = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let n = 100_000;
        let mut sum = DVector::zeros(3);
        for _ in 0..n {
            let c = couple_dirichlet(&mut s, &alpha, 0.3).unwrap();
            assert!((c.center.sum() - 1.0).abs() < 1e-12);
            for (j, (lo, hi)) in c.pairs.iter().enumerate() {
                assert!((lo.sum() - 1.0).abs() < 1e-12 && (hi.sum() - 1.0).abs() < 1e-12);
                assert!(hi[j] >= c.center[j] && c.center[j] >= lo[j]);
            }
            sum += &c.center;
        }
        for j in 0..3 {
            assert!((sum[j] / n as f64 - 1.0 / 3.0).abs() < 0.005);
        }
        let bad = DVector::from_vec(vec![1.0, 0.2]);
        assert!(matches!(couple_dirichlet(&mut s, &bad, 0.3), Err(Error::Boundary { .. })));
    }

    #[test]
    fn wishart_increments_are_psd_and_mean_matches() {
        let mut s = RandomStream::new(5);
        let c = DMatrix::<f64>::identity(3, 3);
        let n = 10_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let (t, base) = couple_wishart(&mut s, 60.0, &c, 6.0).unwrap();
            let diff = t.plus.as_matrix() - t.minus.as_matrix();
            assert!(crate::distributions::min_eigenvalue(&diff) > -1e-9);
            assert!((t.center.as_matrix() - &base.w_center).amax() < 1e-9);
            acc += t.center.as_matrix();
        }
        acc /= n as f64;
        assert!((acc - DMatrix::<f64>::identity(3, 3) * 60.0).amax() < 1.0);
    }

    #[test]
    fn wishart_constraints_named() {
        let mut s = RandomStream::new(6);
        let c = DMatrix::<f64>::identity(3, 3);
        let e = couple_wishart(&mut s, 10.0, &c, 1.0).unwrap_err();
        assert!(e.to_string().contains("epsilon > p - 1"));
        assert!(couple_wishart(&mut s, 5.0, &c, 4.0).is_err());
        assert!(couple_wishart_with(&mut s, 5.0, &c, 4.0, Stencil::Forward).is_ok());
    }

    #[test]
    fn student_fixed_df_is_radially_ordered() {
        let mut s = RandomStream::new(7);
        let mu = DVector::from_vec(vec![1.0, -2.0]);
        let sc = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        for _ in 0..10_000 {
            let (t, _) =
                couple_student_mv_with(&mut s, 5.0, &mu, &sc, 1.0, Stencil::Central, StudentNormalization::FixedDf)
                    .unwrap();
            let up = &t.plus - &mu;
            let dn = &t.minus - &mu;
            assert!(up.norm() <= dn.norm());
            // positive multiples of each other
            let ratio = up.dot(&dn) / (up.norm() * dn.norm());
            assert!((ratio - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn student_center_variance() {
        let mut s = RandomStream::new(8);
        let mu = DVector::zeros(2);
        let sc = DMatrix::identity(2, 2);
        let n = 100_000;
        let mut sq = 0.0;
        for _ in 0..n {
            let (t, base) = couple_student_mv(&mut s, 5.0, &mu, &sc, 1.0).unwrap();
            assert!((&t.center - base.offset(5.0)).amax() < 1e-12);
            sq += t.center[0] * t.center[0];
        }
        assert!((sq / n as f64 - 5.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn poisson_conditioned_properties() {
        let mut s = RandomStream::new(9);
        for _ in 0..100_000 {
            let c = couple_poisson(&mut s, 2.0, 0.1, PoissonMode::Conditioned).unwrap();
            assert!(c.k_plus() >= c.k_minus() + 1);
            assert!(c.triple.center >= c.k_minus() && c.triple.center <= c.k_plus() + 1000);
        }
        let c = couple_poisson(&mut s, 2.0, 0.1, PoissonMode::Conditioned).unwrap();
        assert!((c.weight - 0.906346234).abs() < 1e-9);
        assert!((c.mass_factor() - (1.0 - (-0.2f64).exp())).abs() < 1e-15);
        let c = couple_poisson(&mut s, 2.0, 0.1, PoissonMode::Naive).unwrap();
        assert_eq!(c.weight, 1.0);
        assert!(matches!(
            couple_poisson(&mut s, 0.1, 0.1, PoissonMode::Naive),
            Err(Error::Boundary { .. })
        ));
    }

    #[test]
    fn determinism() {
        let a: Vec<_> = {
            let mut s = RandomStream::new(10);
            (0..50).map(|_| couple_gamma(&mut s, 2.0, 1.0, 0.5).unwrap().0).collect()
        };
        let b: Vec<_> = {
            let mut s = RandomStream::new(10);
            (0..50).map(|_| couple_gamma(&mut s, 2.0, 1.0, 0.5).unwrap().0).collect()
        };
        assert_eq!(a, b);
    }
}
