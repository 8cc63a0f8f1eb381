//! Exact gradients for the conjugate model and bias/variance/MSE measurement.

use crate::distributions::special::{digamma, ln_gamma, trigamma};
use crate::distributions::RandomStream;
use crate::error::{Error, Result};
use crate::estimators::{estimate, BlockMethod, EstimatorId, EstimatorPlan, GradientEstimate};
use crate::families::{FamilySpec, VariationalParams};
use crate::models::{GammaNormal, TargetModel};
use crate::optimize::{adam_step, project, AdamState};

/// `KL(Γ(α, β) ‖ Γ(α*, β*))` with both in shape/rate form.
pub fn kl_gamma(alpha: f64, beta: f64, alpha_star: f64, beta_star: f64) -> Result<f64> {
    for (name, v) in [("alpha", alpha), ("beta", beta), ("alpha*", alpha_star), ("beta*", beta_star)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::domain("kl_gamma", format!("{name} must be positive, got {v}")));
        }
    }
    Ok((alpha - alpha_star) * digamma(alpha)? - ln_gamma(alpha)? + ln_gamma(alpha_star)?
        + alpha_star * (beta.ln() - beta_star.ln())
        + alpha * (beta_star - beta) / beta)
}

/// ELBO gradient `(∂α, ∂β)` for a Gamma(α, β) approximation when the exact
/// posterior is Gamma(α*, β*): the negative gradient of the KL divergence.
pub fn true_gradient_gamma(alpha: f64, beta: f64, alpha_star: f64, beta_star: f64) -> Result<(f64, f64)> {
    kl_gamma(alpha, beta, alpha_star, beta_star)?;
    let d_alpha = (alpha - alpha_star) * trigamma(alpha)? + (beta_star - beta) / beta;
    let d_beta = alpha_star / beta - alpha * beta_star / (beta * beta);
    Ok((-d_alpha, -d_beta))
}

/// Bias, variance and MSE of one scalar gradient coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStats {
    /// Block name, with `[i]` appended for coordinates of vector blocks.
    pub name: String,
    pub true_gradient: f64,
    pub mean: f64,
    pub bias: f64,
    /// Population variance, so that `mse = bias² + variance`.
    pub variance: f64,
    /// Approximate standard error of `variance`.
    pub variance_se: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorStats {
    pub blocks: Vec<BlockStats>,
    pub n_reps: usize,
    /// Set when an estimate failed; the statistics then cover the reps
    /// before the failure.
    pub error: Option<Error>,
}

impl EstimatorStats {
    pub fn get(&self, name: &str) -> Option<&BlockStats> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

fn lookup(g: &GradientEstimate, key: &str) -> Option<f64> {
    if let Some(v) = g.get(key) {
        return v.scalar();
    }
    let open = key.rfind('[')?;
    let idx: usize = key[open + 1..].strip_suffix(']')?.parse().ok()?;
    g.get(&key[..open])?.as_slice().get(idx).copied()
}

#[cfg(feature = "parallel")]
fn map_streams<T: Send>(streams: Vec<RandomStream>, f: impl Fn(RandomStream) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    streams.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_streams<T>(streams: Vec<RandomStream>, f: impl Fn(RandomStream) -> T) -> Vec<T> {
    streams.into_iter().map(f).collect()
}

/// Summaries of `values` against `truth`.
pub fn summarize(name: &str, values: &[f64], truth: f64) -> BlockStats {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let mse = values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / n;
    BlockStats {
        name: name.to_string(),
        true_gradient: truth,
        mean,
        bias: mean - truth,
        variance,
        variance_se: ((m4 - variance * variance).max(0.0) / n).sqrt(),
        mse,
    }
}

/// Repeat an estimator `n_reps` times on independent sub-streams and compare
/// the named coordinates with `true_grad`. Reps may run in parallel; results
/// are aggregated in rep order.
pub fn measure_with<F>(estimator: F, true_grad: &[(String, f64)], n_reps: usize, stream: &mut RandomStream) -> EstimatorStats
where
    F: Fn(&mut RandomStream) -> Result<GradientEstimate> + Sync + Send,
{
    let streams = stream.split(n_reps);
    let results = map_streams(streams, |mut s| estimator(&mut s));
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(n_reps); true_grad.len()];
    let mut error = None;
    let mut done = 0;
    for r in results {
        match r {
            Ok(g) => {
                let row: Option<Vec<f64>> = true_grad.iter().map(|(k, _)| lookup(&g, k)).collect();
                match row {
                    Some(row) => {
                        for (vals, v) in values.iter_mut().zip(row) {
                            vals.push(v);
                        }
                        done += 1;
                    }
                    None => {
                        error = Some(Error::Contract("estimate lacks a requested block".into()));
                        break;
                    }
                }
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    EstimatorStats {
        blocks: true_grad
            .iter()
            .zip(&values)
            .map(|((k, t), vals)| summarize(k, vals, *t))
            .collect(),
        n_reps: done,
        error,
    }
}

/// Bias/variance/MSE of the estimator `id` at `params`, each estimate using
/// `n_per_estimate` draws. The oracle id returns `true_grad` exactly.
#[allow(clippy::too_many_arguments)]
pub fn measure_estimator(
    id: EstimatorId,
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    true_grad: &[(String, f64)],
    n_per_estimate: usize,
    n_reps: usize,
    stream: &mut RandomStream,
) -> Result<EstimatorStats> {
    if n_reps < 2 {
        return Err(Error::Contract("need at least two repetitions".into()));
    }
    if id == EstimatorId::Oracle {
        let exact = GradientEstimate {
            blocks: true_grad
                .iter()
                .map(|(k, v)| crate::estimators::BlockGradient {
                    name: k.clone(),
                    value: (*v).into(),
                })
                .collect(),
            n_samples: 0,
            estimator: EstimatorId::Oracle,
        };
        return Ok(measure_with(|_| Ok(exact.clone()), true_grad, n_reps, stream));
    }
    let plan = crate::estimators::plan_for(id, model, params)?;
    Ok(measure_plan(&plan, model, family, params, true_grad, n_per_estimate, n_reps, stream))
}

/// As [`measure_estimator`] with an explicit per-block plan.
#[allow(clippy::too_many_arguments)]
pub fn measure_plan(
    plan: &EstimatorPlan,
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    true_grad: &[(String, f64)],
    n_per_estimate: usize,
    n_reps: usize,
    stream: &mut RandomStream,
) -> EstimatorStats {
    measure_with(
        |s| estimate(model, family, params, plan, s, n_per_estimate),
        true_grad,
        n_reps,
        stream,
    )
}

/// Settings of the Gamma-Normal MSE sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub iterations: usize,
    /// Draws per gradient estimate.
    pub n_per_estimate: usize,
    pub n_reps: usize,
    /// Starting shape; the rate is fixed at the posterior rate.
    pub alpha_init: f64,
    /// Adam learning rate of the exact-gradient ascent.
    pub learning_rate: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            epsilons: vec![0.1, 1.0, 10.0, 100.0],
            iterations: 200,
            n_per_estimate: 2,
            n_reps: 1000,
            alpha_init: 20.0,
            learning_rate: 0.5,
        }
    }
}

/// One row of an MSE table.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub iter: usize,
    pub estimator: EstimatorId,
    /// Finite-difference step, `None` for score estimators.
    pub epsilon: Option<f64>,
    pub block: String,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
}

/// Rows of an MSE sweep and the shape at each measured iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub alphas: Vec<f64>,
}

/// Ascend the ELBO of a Gamma(α, β*) approximation with the exact gradient
/// and, before every step, measure BBVI and VIND for each ε on the shape.
/// The rate stays at the posterior rate throughout.
pub fn mse_sweep(model: &GammaNormal, config: &SweepConfig, stream: &mut RandomStream) -> Result<SweepOutput> {
    use crate::families::{Factor, FactorKind};
    let (a_star, b_star) = model.posterior();
    let family = FamilySpec::new(vec![Factor::new("tau", FactorKind::Gamma)])?;
    let mut rows = Vec::new();
    let mut alphas = Vec::with_capacity(config.iterations);
    let mut alpha = config.alpha_init;
    let oracle_params = family
        .builder()
        .fd("tau.shape", alpha, 1.0)
        .reparam("tau.rate", b_star)
        .build()?;
    let mut adam = AdamState::new(&oracle_params, vec![config.learning_rate, 0.0])?;
    let mut ascent = oracle_params;
    let block = "tau.shape".to_string();
    for iter in 0..config.iterations {
        alphas.push(alpha);
        let (g_alpha, _) = true_gradient_gamma(alpha, b_star, a_star, b_star)?;
        let truth = vec![(block.clone(), g_alpha)];
        let mut s = stream.split(1 + config.epsilons.len());
        let bbvi_params = family
            .builder()
            .fd("tau.shape", alpha, 1.0)
            .reparam("tau.rate", b_star)
            .build()?;
        let bbvi_plan = EstimatorPlan::new(vec![BlockMethod::Bbvi, BlockMethod::Frozen]);
        let st = measure_plan(&bbvi_plan, model, &family, &bbvi_params, &truth, config.n_per_estimate, config.n_reps, &mut s[0]);
        if let Some(e) = st.error {
            return Err(e);
        }
        rows.push(SweepRow {
            iter,
            estimator: EstimatorId::Bbvi,
            epsilon: None,
            block: block.clone(),
            bias: st.blocks[0].bias,
            variance: st.blocks[0].variance,
            mse: st.blocks[0].mse,
        });
        for (k, &eps) in config.epsilons.iter().enumerate() {
            let p = family
                .builder()
                .fd("tau.shape", alpha, eps)
                .reparam("tau.rate", b_star)
                .build()?;
            let (p, _) = project(&p, &family);
            let plan = EstimatorPlan::new(vec![BlockMethod::Vind, BlockMethod::Frozen]);
            let st = measure_plan(&plan, model, &family, &p, &truth, config.n_per_estimate, config.n_reps, &mut s[1 + k]);
            if let Some(e) = st.error {
                return Err(e);
            }
            rows.push(SweepRow {
                iter,
                estimator: EstimatorId::Vind,
                epsilon: Some(eps),
                block: block.clone(),
                bias: st.blocks[0].bias,
                variance: st.blocks[0].variance,
                mse: st.blocks[0].mse,
            });
        }
        let g = GradientEstimate {
            blocks: vec![crate::estimators::BlockGradient {
                name: block.clone(),
                value: g_alpha.into(),
            }],
            n_samples: 0,
            estimator: EstimatorId::Oracle,
        };
        adam_step(&mut adam, &g, &mut ascent)?;
        ascent = project(&ascent, &family).0;
        alpha = ascent.scalar("tau.shape").expect("scalar block");
    }
    Ok(SweepOutput { rows, alphas })
}

/// One estimator in a variance probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeEstimator {
    pub label: String,
    pub plan: EstimatorPlan,
}

/// Variance of a single-draw gradient estimate at one snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub iter: usize,
    pub estimator: String,
    pub block: String,
    /// Sum of per-coordinate variances of the block.
    pub variance: f64,
}

/// For every `every_k`-th snapshot, estimate the per-block variance of each
/// estimator from `n_probe` single-draw estimates.
pub fn variance_probe(
    model: &dyn TargetModel,
    family: &FamilySpec,
    snapshots: &[(usize, VariationalParams)],
    estimators: &[ProbeEstimator],
    every_k: usize,
    n_probe: usize,
    stream: &mut RandomStream,
) -> Result<Vec<ProbeRow>> {
    if every_k == 0 || n_probe < 2 {
        return Err(Error::Contract("variance probe needs every_k >= 1 and n_probe >= 2".into()));
    }
    let mut rows = Vec::new();
    for (iter, params) in snapshots.iter().filter(|(it, _)| it % every_k == 0) {
        let mut subs = stream.split(estimators.len());
        for (pe, s) in estimators.iter().zip(subs.iter_mut()) {
            let streams = s.split(n_probe);
            let results = map_streams(streams, |mut st| estimate(model, family, params, &pe.plan, &mut st, 1));
            let estimates = results.into_iter().collect::<Result<Vec<_>>>()?;
            for (bi, bg) in estimates[0].blocks.iter().enumerate() {
                let len = bg.value.len();
                let mut total = 0.0;
                for c in 0..len {
                    let vals: Vec<f64> = estimates.iter().map(|e| e.blocks[bi].value.as_slice()[c]).collect();
                    total += summarize("", &vals, 0.0).variance;
                }
                rows.push(ProbeRow {
                    iter: *iter,
                    estimator: pe.label.clone(),
                    block: bg.name.clone(),
                    variance: total,
                });
            }
        }
    }
    Ok(rows)
}

/// Trailing moving average; the first `window - 1` entries average the
/// available prefix.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &x) in series.iter().enumerate() {
        sum += x;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
