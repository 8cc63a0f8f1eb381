//! Estimators and fits checked against closed-form answers.

mod common;

use nalgebra::dvector;

use common::mean_se;
use vind::diagnostics::{kl_gamma, true_gradient_gamma};
use vind::distributions::special::digamma;
use vind::distributions::RandomStream;
use vind::estimators::{estimate, BlockMethod, EstimatorPlan};
use vind::families::{Factor, FactorKind, FamilySpec, Theta, ThetaValue, VariationalParams};
use vind::models::{synth_gamma_normal, FnTarget, GammaNormal, GammaNormalData};
use vind::optimize::{estimate_elbo, fit, FitConfig};

fn gamma_family() -> FamilySpec {
    FamilySpec::new(vec![Factor::new("tau", FactorKind::Gamma)]).unwrap()
}

fn gamma_params(alpha: f64, beta: f64, eps: f64) -> VariationalParams {
    gamma_family().builder().fd("tau.shape", alpha, eps).reparam("tau.rate", beta).build().unwrap()
}

fn model() -> GammaNormal {
    GammaNormal::new(synth_gamma_normal(&mut RandomStream::new(17), 100, 1.0).unwrap())
}

/// Per-estimate values of one block over `reps` independent estimates.
fn repeat(
    model: &GammaNormal,
    params: &VariationalParams,
    plan: &EstimatorPlan,
    block: &str,
    reps: usize,
    n: usize,
    seed: u64,
) -> Vec<f64> {
    let fam = gamma_family();
    RandomStream::new(seed)
        .split(reps)
        .iter_mut()
        .map(|s| estimate(model, &fam, params, plan, s, n).unwrap().scalar(block).unwrap())
        .collect()
}

#[test]
fn vind_mean_matches_closed_form_difference() {
    let m = model();
    let (a_star, b_star) = m.posterior();
    for (alpha, eps) in [(20.0, 1.0), (40.0, 10.0), (3.0, 0.5)] {
        let p = gamma_params(alpha, b_star, eps);
        let plan = EstimatorPlan::new(vec![BlockMethod::Vind, BlockMethod::Frozen]);
        let v = repeat(&m, &p, &plan, "tau.shape", 2000, 4, 1);
        let (mean, se) = mean_se(&v);
        // with the rate at β*, log p - log q = const + (α* - α) ln τ
        let exact = (a_star - alpha) * (digamma(alpha + eps).unwrap() - digamma(alpha - eps).unwrap()) / (2.0 * eps);
        assert!((mean - exact).abs() < 5.0 * se, "alpha {alpha} eps {eps}: {mean} vs {exact} (se {se})");
    }
}

#[test]
fn score_estimators_are_unbiased() {
    let m = model();
    let (a_star, b_star) = m.posterior();
    let (alpha, beta) = (30.0, 0.8 * b_star);
    let p = gamma_params(alpha, beta, 1.0);
    let (ga, gb) = true_gradient_gamma(alpha, beta, a_star, b_star).unwrap();
    for method in [BlockMethod::Bbvi, BlockMethod::BbviRb] {
        let plan = EstimatorPlan::new(vec![method, method]);
        for (block, truth) in [("tau.shape", ga), ("tau.rate", gb)] {
            let v = repeat(&m, &p, &plan, block, 2000, 10, 2);
            let (mean, se) = mean_se(&v);
            assert!((mean - truth).abs() < 5.0 * se, "{method:?} {block}: {mean} vs {truth}");
        }
    }
}

#[test]
fn vind_rate_and_shape_together_match_truth() {
    // small ε: the coupled difference is close to the exact shape gradient
    let m = model();
    let (a_star, b_star) = m.posterior();
    let (alpha, beta) = (30.0, 1.3 * b_star);
    let p = gamma_params(alpha, beta, 0.05);
    let plan = EstimatorPlan::new(vec![BlockMethod::Vind, BlockMethod::Reparam]);
    let (ga, gb) = true_gradient_gamma(alpha, beta, a_star, b_star).unwrap();
    for (block, truth) in [("tau.shape", ga), ("tau.rate", gb)] {
        let v = repeat(&m, &p, &plan, block, 1000, 4, 3);
        let (mean, se) = mean_se(&v);
        assert!((mean - truth).abs() < 5.0 * se + 1e-3 * truth.abs(), "{block}: {mean} vs {truth}");
    }
}

#[test]
fn reparam_gradient_of_gaussian_elbo() {
    // q = N(m, s²), p = N(0, 1): dELBO/dm = -m, dELBO/ds = 1/s - s
    let fam = FamilySpec::new(vec![Factor::new("x", FactorKind::GaussianDiag { dim: 1, spherical: true })]).unwrap();
    let target = FnTarget::with_gradient(
        |t: &Theta| -0.5 * t.get(0).vector().unwrap()[0].powi(2),
        |t: &Theta| Some(Theta(vec![ThetaValue::Vector(-t.get(0).vector().unwrap())])),
    );
    let (mu, s) = (0.7, 0.4);
    let p = fam.builder().reparam("x.loc", dvector![mu]).reparam("x.scale", s).build().unwrap();
    let plan = EstimatorPlan::new(vec![BlockMethod::Reparam, BlockMethod::Reparam]);
    let est: Vec<(f64, f64)> = RandomStream::new(5)
        .split(1000)
        .iter_mut()
        .map(|st| {
            let g = estimate(&target, &fam, &p, &plan, st, 8).unwrap();
            (g.get("x.loc").unwrap().as_slice()[0], g.scalar("x.scale").unwrap())
        })
        .collect();
    let (ml, sl) = mean_se(&est.iter().map(|e| e.0).collect::<Vec<_>>());
    let (ms, ss) = mean_se(&est.iter().map(|e| e.1).collect::<Vec<_>>());
    assert!((ml + mu).abs() < 5.0 * sl + 1e-12);
    assert!((ms - (1.0 / s - s)).abs() < 5.0 * ss + 1e-12);
}

#[test]
fn elbo_estimate_matches_evidence_minus_kl() {
    let data = GammaNormalData::new(vec![0.4, -1.1, 0.3, 2.0, -0.2], 0.0, 2.0, 1.5).unwrap();
    let m = GammaNormal::new(data.clone());
    let (a_star, b_star) = m.posterior();
    // evidence via log p(D, τ) - log p(τ | D) at τ = 1
    let log_post_at_1 = a_star * b_star.ln() - vind::distributions::ln_gamma(a_star).unwrap() - b_star;
    let evidence = m.log_joint(1.0) - log_post_at_1;
    let (alpha, beta) = (4.0, 3.0);
    let expected = evidence - kl_gamma(alpha, beta, a_star, b_star).unwrap();
    let est: Vec<f64> = RandomStream::new(6)
        .split(200)
        .iter_mut()
        .map(|s| estimate_elbo(&m, &gamma_family(), &gamma_params(alpha, beta, 1.0), s, 500).unwrap())
        .collect();
    let (mean, se) = mean_se(&est);
    assert!((mean - expected).abs() < 5.0 * se, "{mean} vs {expected}");
}

#[test]
fn vind_fit_reaches_conjugate_posterior() {
    let m = model();
    let (a_star, b_star) = m.posterior();
    let init = gamma_params(10.0, 20.0, 1.0);
    let plan = EstimatorPlan::new(vec![BlockMethod::Vind, BlockMethod::Reparam]);
    let mut cfg = FitConfig::new(&init, plan, 8);
    cfg.iterations = 3000;
    cfg.n_samples = 4;
    cfg.elbo_samples = 1;
    cfg.learning_rates = vec![0.2, 0.2];
    let trace = fit(&m, &gamma_family(), &init, &cfg).unwrap();
    assert!(trace.aborted.is_none());
    let last = &trace.last().params;
    let (a, b) = (last.scalar("tau.shape").unwrap(), last.scalar("tau.rate").unwrap());
    let kl0 = kl_gamma(10.0, 20.0, a_star, b_star).unwrap();
    let kl = kl_gamma(a, b, a_star, b_star).unwrap();
    assert!(kl < 0.01 * kl0 && kl < 0.05, "KL {kl0} -> {kl} (shape {a}, rate {b})");
}
