//! Browser demo: coupled Gamma draws, gradient variance against ε, and a
//! small fit on the Gamma-Normal model.
//!
//! The `#[wasm_bindgen]` exports are thin wrappers over plain functions so
//! the numbers can be checked natively.

use wasm_bindgen::prelude::*;

use vind::couplings::couple_gamma;
use vind::diagnostics::{kl_gamma, measure_plan, true_gradient_gamma};
use vind::distributions::{sample_gamma, RandomStream};
use vind::estimators::{BlockMethod, EstimatorPlan};
use vind::families::{Factor, FactorKind, FamilySpec, VariationalParams};
use vind::models::{synth_gamma_normal, GammaNormal};
use vind::optimize::{fit, FitConfig};

/// Observations behind the variance and fit panels.
const DATA_SEED: u64 = 7;
const DATA_N: usize = 100;

fn model() -> Result<GammaNormal, String> {
    let mut s = RandomStream::new(DATA_SEED);
    let data = synth_gamma_normal(&mut s, DATA_N, 1.0).map_err(|e| e.to_string())?;
    Ok(GammaNormal::new(data))
}

fn family() -> FamilySpec {
    FamilySpec::new(vec![Factor::new("tau", FactorKind::Gamma)]).expect("one gamma factor")
}

fn params(alpha: f64, beta: f64, eps: f64) -> Result<VariationalParams, String> {
    family()
        .builder()
        .fd("tau.shape", alpha, eps)
        .reparam("tau.rate", beta)
        .build()
        .map_err(|e| e.to_string())
}

/// `n` draws at `α - ε` and `α + ε` from Gamma(·, β), flattened as
/// `[minus_0, plus_0, minus_1, plus_1, ...]`. Coupled draws share their
/// Gamma core; independent ones do not.
pub fn gamma_pairs(alpha: f64, beta: f64, eps: f64, n: usize, coupled: bool, seed: u64) -> Result<Vec<f64>, String> {
    if !(beta > 0.0) || !(eps > 0.0) || !(alpha > eps) {
        return Err(format!("need beta > 0 and alpha > eps > 0, got alpha={alpha}, beta={beta}, eps={eps}"));
    }
    let mut s = RandomStream::new(seed);
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        if coupled {
            let (t, _) = couple_gamma(&mut s, alpha, beta, eps).map_err(|e| e.to_string())?;
            out.push(t.minus);
            out.push(t.plus);
        } else {
            out.push(sample_gamma(&mut s, alpha - eps, beta).map_err(|e| e.to_string())?);
            out.push(sample_gamma(&mut s, alpha + eps, beta).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

/// Variance of the shape gradient at shape `alpha` (rate at the posterior
/// rate), two draws per estimate. For each ε returns coupled then uncoupled
/// VIND variance; the score-function variance comes last.
pub fn shape_variances(alpha: f64, epsilons: &[f64], n_reps: usize, seed: u64) -> Result<Vec<f64>, String> {
    let m = model()?;
    let (a_star, b_star) = m.posterior();
    let fam = family();
    let (g, _) = true_gradient_gamma(alpha, b_star, a_star, b_star).map_err(|e| e.to_string())?;
    let truth = vec![("tau.shape".to_string(), g)];
    let mut s = RandomStream::new(seed);
    let mut measure = |p: &VariationalParams, method: BlockMethod| -> Result<f64, String> {
        let plan = EstimatorPlan::new(vec![method, BlockMethod::Frozen]);
        let st = measure_plan(&plan, &m, &fam, p, &truth, 2, n_reps, &mut s);
        match st.error {
            Some(e) => Err(e.to_string()),
            None => Ok(st.blocks[0].variance),
        }
    };
    let mut out = Vec::with_capacity(2 * epsilons.len() + 1);
    for &eps in epsilons {
        let p = params(alpha, b_star, eps)?;
        out.push(measure(&p, BlockMethod::Vind)?);
        out.push(measure(&p, BlockMethod::VindUncoupled)?);
    }
    out.push(measure(&params(alpha, b_star, 1.0)?, BlockMethod::Bbvi)?);
    Ok(out)
}

/// Fit shape and rate from shape 20, rate 5 and return `KL(q ‖ posterior)`
/// after every iteration. `method` is `"vind"` (coupled difference on the
/// shape, pathwise rate) or `"bbvi"` (score function on both).
pub fn kl_trace(method: &str, eps: f64, learning_rate: f64, iterations: usize, seed: u64) -> Result<Vec<f64>, String> {
    let m = model()?;
    let (a_star, b_star) = m.posterior();
    let plan = match method {
        "vind" => EstimatorPlan::new(vec![BlockMethod::Vind, BlockMethod::Reparam]),
        "bbvi" => EstimatorPlan::new(vec![BlockMethod::Bbvi, BlockMethod::Bbvi]),
        other => return Err(format!("unknown method `{other}`")),
    };
    let init = params(20.0, 5.0, eps)?;
    let mut cfg = FitConfig::new(&init, plan, seed);
    cfg.iterations = iterations;
    cfg.n_samples = 2;
    cfg.elbo_samples = 1;
    cfg.learning_rates = vec![learning_rate, learning_rate];
    let trace = fit(&m, &family(), &init, &cfg).map_err(|e| e.to_string())?;
    trace
        .records
        .iter()
        .map(|r| {
            let a = r.params.scalar("tau.shape").expect("scalar");
            let b = r.params.scalar("tau.rate").expect("scalar");
            kl_gamma(a, b, a_star, b_star).map_err(|e| e.to_string())
        })
        .collect()
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = gammaPairs)]
pub fn gamma_pairs_js(alpha: f64, beta: f64, eps: f64, n: usize, coupled: bool, seed: u32) -> Result<Vec<f64>, JsValue> {
    js(gamma_pairs(alpha, beta, eps, n, coupled, seed.into()))
}

#[wasm_bindgen(js_name = shapeVariances)]
pub fn shape_variances_js(alpha: f64, epsilons: Vec<f64>, n_reps: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    js(shape_variances(alpha, &epsilons, n_reps, seed.into()))
}

#[wasm_bindgen(js_name = klTrace)]
pub fn kl_trace_js(method: &str, eps: f64, learning_rate: f64, iterations: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    js(kl_trace(method, eps, learning_rate, iterations, seed.into()))
}
