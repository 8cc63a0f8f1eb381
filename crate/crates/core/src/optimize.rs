//! Adam ascent of the ELBO with domain projection.

use crate::distributions::{map_eigenvalues, min_eigenvalue, symmetrize, RandomStream};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorPlan, GradientEstimate};
use crate::families::{sample_centers, BlockKind, Domain, FamilySpec, ParamValue, QDensity, VariationalParams, DOMAIN_MARGIN};
use crate::models::TargetModel;

/// Default learning rate: 0.01 for finite-difference blocks (shapes, degrees
/// of freedom, rates), 0.001 for location and scale blocks.
pub fn default_learning_rate(kind: &BlockKind) -> f64 {
    if kind.is_fd() {
        0.01
    } else {
        0.001
    }
}

/// Adam moments and constants, one entry per block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub stability: f64,
    pub learning_rates: Vec<f64>,
    m: Vec<ParamValue>,
    v: Vec<ParamValue>,
    step: u64,
}

impl AdamState {
    /// Standard constants `β₁ = 0.9`, `β₂ = 0.999`, stability `1e-8`.
    pub fn new(params: &VariationalParams, learning_rates: Vec<f64>) -> Result<Self> {
        if learning_rates.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} learning rates for {} blocks",
                learning_rates.len(),
                params.len()
            )));
        }
        if let Some(lr) = learning_rates.iter().find(|lr| !(lr.is_finite() && **lr >= 0.0)) {
            return Err(Error::Contract(format!("invalid learning rate {lr}")));
        }
        let zeros: Vec<_> = params.blocks().iter().map(|b| b.value.zeros_like()).collect();
        Ok(AdamState {
            beta1: 0.9,
            beta2: 0.999,
            stability: 1e-8,
            learning_rates,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    pub fn with_default_rates(params: &VariationalParams) -> Self {
        let lrs = params.blocks().iter().map(|b| default_learning_rate(&b.kind)).collect();
        Self::new(params, lrs).expect("default rates are valid")
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam ascent step. Blocks absent from `grads` keep
/// their value and moments.
pub fn adam_step(state: &mut AdamState, grads: &GradientEstimate, params: &mut VariationalParams) -> Result<()> {
    for g in &grads.blocks {
        if !g.value.is_finite() {
            return Err(Error::Optimizer {
                block: g.name.clone(),
                msg: "non-finite gradient".into(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for g in &grads.blocks {
        let i = params.index_of(&g.name).ok_or_else(|| Error::Optimizer {
            block: g.name.clone(),
            msg: "gradient for an unknown block".into(),
        })?;
        if !g.value.same_shape(&params.blocks()[i].value) {
            return Err(Error::Optimizer {
                block: g.name.clone(),
                msg: "gradient shape does not match the block".into(),
            });
        }
        let lr = state.learning_rates[i];
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        let x = params.blocks_mut()[i].value.as_mut_slice();
        for (k, &gk) in g.value.as_slice().iter().enumerate() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            x[k] += lr * mh / (vh.sqrt() + state.stability);
        }
    }
    Ok(())
}

/// Floors used by [`project`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionConfig {
    /// Floor for positive scalars and for eigenvalues of matrix blocks.
    pub positive_floor: f64,
    /// Margin above a degrees-of-freedom bound.
    pub margin: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            positive_floor: 1e-3,
            margin: DOMAIN_MARGIN,
        }
    }
}

/// What a projection changed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProjectionReport {
    pub clipped: Vec<String>,
    /// Blocks switched to one-sided differencing.
    pub to_one_sided: Vec<String>,
    /// Blocks switched back to central differencing.
    pub to_two_sided: Vec<String>,
}

/// Project with the default floors.
pub fn project(params: &VariationalParams, family: &FamilySpec) -> (VariationalParams, ProjectionReport) {
    project_with(params, family, &ProjectionConfig::default())
}

/// Clip every block into its domain and set the one-sided flag of each
/// finite-difference block according to whether `λ - ε` stays valid.
pub fn project_with(
    params: &VariationalParams,
    _family: &FamilySpec,
    cfg: &ProjectionConfig,
) -> (VariationalParams, ProjectionReport) {
    let mut out = params.clone();
    let mut report = ProjectionReport::default();
    for b in out.blocks_mut() {
        let floor = match b.domain {
            Domain::Real => None,
            Domain::Positive => Some(cfg.positive_floor),
            Domain::WishartDf { dim } => {
                let eps = b.kind.epsilon().unwrap_or(0.0);
                Some(dim as f64 - 1.0 + eps + cfg.margin)
            }
            Domain::SymmetricPd => None,
        };
        let mut changed = false;
        if let Some(fl) = floor {
            for x in b.value.as_mut_slice() {
                if !(*x >= fl) {
                    *x = fl;
                    changed = true;
                }
            }
        }
        if b.domain == Domain::SymmetricPd {
            if let ParamValue::Matrix(m) = &mut b.value {
                let scale = m.amax().max(f64::MIN_POSITIVE);
                if (&*m - m.transpose()).amax() > 1e-10 * scale {
                    *m = symmetrize(m);
                    changed = true;
                }
                if !(min_eigenvalue(m) >= cfg.positive_floor) {
                    *m = symmetrize(&map_eigenvalues(m, |l| l.max(cfg.positive_floor)));
                    changed = true;
                }
            }
        }
        if changed {
            report.clipped.push(b.name.clone());
        }
        if let BlockKind::FiniteDifference { epsilon, one_sided } = b.kind {
            let want = !b.two_sided_valid();
            if want != one_sided {
                b.kind = BlockKind::FiniteDifference {
                    epsilon,
                    one_sided: want,
                };
                if want {
                    report.to_one_sided.push(b.name.clone());
                } else {
                    report.to_two_sided.push(b.name.clone());
                }
            }
        }
    }
    (out, report)
}

/// Per-draw log-ratios `log p - log q` at `n` fresh centre draws.
pub fn elbo_terms(
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
) -> Result<Vec<f64>> {
    let q = QDensity::new(family, params)?;
    let draws = sample_centers(family, params, stream, n)?;
    draws
        .iter()
        .map(|d| {
            let v = model.log_density(&d.center) - q.log_q(&d.center);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Estimator {
                    msg: format!("non-finite ELBO term {v}"),
                    theta: d.center.to_string(),
                })
            }
        })
        .collect()
}

/// Monte-Carlo ELBO `E_q[log p - log q]` from `n` draws.
pub fn estimate_elbo(
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("need at least one sample".into()));
    }
    let terms = elbo_terms(model, family, params, stream, n)?;
    Ok(terms.iter().sum::<f64>() / n as f64)
}

/// Anything that can produce a gradient at given parameters.
pub trait GradientSource {
    fn gradient(&self, params: &VariationalParams, stream: &mut RandomStream) -> Result<GradientEstimate>;
}

impl<F> GradientSource for F
where
    F: Fn(&VariationalParams, &mut RandomStream) -> Result<GradientEstimate>,
{
    fn gradient(&self, params: &VariationalParams, stream: &mut RandomStream) -> Result<GradientEstimate> {
        self(params, stream)
    }
}

/// Gradient source running [`estimate`] with a fixed plan.
pub struct PlanSource<'a> {
    pub model: &'a dyn TargetModel,
    pub family: &'a FamilySpec,
    pub plan: EstimatorPlan,
    pub n_samples: usize,
}

impl GradientSource for PlanSource<'_> {
    fn gradient(&self, params: &VariationalParams, stream: &mut RandomStream) -> Result<GradientEstimate> {
        estimate(self.model, self.family, params, &self.plan, stream, self.n_samples)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub plan: EstimatorPlan,
    pub n_samples: usize,
    pub iterations: usize,
    /// One per block.
    pub learning_rates: Vec<f64>,
    pub seed: u64,
    /// Draws used for the negative-ELBO estimate recorded each iteration.
    pub elbo_samples: usize,
    pub projection: ProjectionConfig,
}

impl FitConfig {
    /// Defaults: 1000 iterations, 3 samples per gradient, 100 ELBO draws,
    /// default learning rates.
    pub fn new(params: &VariationalParams, plan: EstimatorPlan, seed: u64) -> Self {
        FitConfig {
            plan,
            n_samples: 3,
            iterations: 1000,
            learning_rates: params.blocks().iter().map(|b| default_learning_rate(&b.kind)).collect(),
            seed,
            elbo_samples: 100,
            projection: ProjectionConfig::default(),
        }
    }

    /// Set the learning rate of the named block.
    pub fn with_rate(mut self, params: &VariationalParams, name: &str, lr: f64) -> Result<Self> {
        let i = params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("no block named `{name}`")))?;
        self.learning_rates[i] = lr;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitRecord {
    pub iter: usize,
    pub neg_elbo: f64,
    pub params: VariationalParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitTrace {
    pub records: Vec<FitRecord>,
    /// Set when an estimator or optimizer error stopped the run early.
    pub aborted: Option<Error>,
}

impl FitTrace {
    pub fn last(&self) -> &FitRecord {
        self.records.last().expect("a trace always holds the initial record")
    }

    pub fn neg_elbo(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.neg_elbo).collect()
    }

    /// Scalar parameter series for a scalar block.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.params.scalar(name).unwrap_or(f64::NAN))
            .collect()
    }
}

/// Fit with the sampling plan in `config`.
pub fn fit(
    model: &dyn TargetModel,
    family: &FamilySpec,
    init: &VariationalParams,
    config: &FitConfig,
) -> Result<FitTrace> {
    let source = PlanSource {
        model,
        family,
        plan: config.plan.clone(),
        n_samples: config.n_samples,
    };
    fit_with(model, family, init, config, &source)
}

/// Fit with an arbitrary gradient source (for instance an exact oracle).
///
/// Iteration `t` uses two sub-streams of a master stream seeded with
/// `config.seed`: one for the gradient, one for the ELBO estimate. Errors
/// during the loop end the run and are stored in [`FitTrace::aborted`];
/// invalid initial parameters are returned as errors.
pub fn fit_with(
    model: &dyn TargetModel,
    family: &FamilySpec,
    init: &VariationalParams,
    config: &FitConfig,
    source: &dyn GradientSource,
) -> Result<FitTrace> {
    family.validate(init)?;
    let mut state = AdamState::new(init, config.learning_rates.clone())?;
    let mut master = RandomStream::new(config.seed);
    let (mut params, _) = project_with(init, family, &config.projection);
    let mut records = Vec::with_capacity(config.iterations + 1);

    let mut s = master.split(2);
    let elbo = estimate_elbo(model, family, &params, &mut s[1], config.elbo_samples)?;
    records.push(FitRecord {
        iter: 0,
        neg_elbo: -elbo,
        params: params.clone(),
    });

    for iter in 1..=config.iterations {
        let mut s = master.split(2);
        let step = source
            .gradient(&params, &mut s[0])
            .and_then(|g| adam_step(&mut state, &g, &mut params))
            .and_then(|_| {
                params = project_with(&params, family, &config.projection).0;
                estimate_elbo(model, family, &params, &mut s[1], config.elbo_samples)
            });
        match step {
            Ok(elbo) => records.push(FitRecord {
                iter,
                neg_elbo: -elbo,
                params: params.clone(),
            }),
            Err(e) => {
                return Ok(FitTrace {
                    records,
                    aborted: Some(e),
                })
            }
        }
    }
    Ok(FitTrace { records, aborted: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{BlockGradient, EstimatorId};
    use crate::families::{Factor, FactorKind};

    fn two_blocks() -> (FamilySpec, VariationalParams) {
        let fam = FamilySpec::new(vec![Factor::new("g", FactorKind::Gamma)]).unwrap();
        let p = fam.builder().fd("g.shape", 2.0, 0.5).reparam("g.rate", 1.0).build().unwrap();
        (fam, p)
    }

    fn grad(a: f64, b: f64) -> GradientEstimate {
        GradientEstimate {
            blocks: vec![
                BlockGradient {
                    name: "g.shape".into(),
                    value: ParamValue::Scalar(a),
                },
                BlockGradient {
                    name: "g.rate".into(),
                    value: ParamValue::Scalar(b),
                },
            ],
            n_samples: 1,
            estimator: EstimatorId::Oracle,
        }
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let (_, mut p) = two_blocks();
        let mut st = AdamState::new(&p, vec![0.001, 0.001]).unwrap();
        adam_step(&mut st, &grad(1.0, 0.0), &mut p).unwrap();
        assert!((p.scalar("g.shape").unwrap() - 2.001).abs() < 1e-9);
        assert_eq!(p.scalar("g.rate").unwrap(), 1.0);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let (_, mut p) = two_blocks();
        let orig = p.clone();
        let mut st = AdamState::with_default_rates(&p);
        for _ in 0..100 {
            adam_step(&mut st, &grad(0.0, 0.0), &mut p).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn rates_scale_moves() {
        let (_, mut p) = two_blocks();
        let mut st = AdamState::new(&p, vec![0.01, 0.001]).unwrap();
        adam_step(&mut st, &grad(0.3, 0.3), &mut p).unwrap();
        let da = p.scalar("g.shape").unwrap() - 2.0;
        let db = p.scalar("g.rate").unwrap() - 1.0;
        assert!((da / db - 10.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let (_, mut p) = two_blocks();
        let mut st = AdamState::with_default_rates(&p);
        match adam_step(&mut st, &grad(0.0, f64::NAN), &mut p) {
            Err(Error::Optimizer { block, .. }) => assert_eq!(block, "g.rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn projection_floors_and_flags() {
        let (fam, mut p) = two_blocks();
        p.set_value("g.shape", 0.05).unwrap();
        let cfg = ProjectionConfig {
            positive_floor: 0.1,
            margin: 1e-3,
        };
        let (q, rep) = project_with(&p, &fam, &cfg);
        assert_eq!(q.scalar("g.shape"), Some(0.1));
        assert_eq!(rep.clipped, vec!["g.shape".to_string()]);
        assert_eq!(rep.to_one_sided, vec!["g.shape".to_string()]);
        // regaining the margin switches back
        let mut r = q.clone();
        r.set_value("g.shape", 3.0).unwrap();
        let (r, rep) = project(&r, &fam);
        assert_eq!(rep.to_two_sided, vec!["g.shape".to_string()]);
        assert!(!matches!(r.blocks()[0].kind, BlockKind::FiniteDifference { one_sided: true, .. }));
    }

    #[test]
    fn projection_is_identity_in_domain() {
        let (fam, p) = two_blocks();
        let (q, rep) = project(&p, &fam);
        assert_eq!(p, q);
        assert_eq!(rep, ProjectionReport::default());
    }

    #[test]
    fn wishart_df_floor() {
        let fam = FamilySpec::new(vec![Factor::new("w", FactorKind::Wishart { dim: 3 })]).unwrap();
        let mut p = fam
            .builder()
            .fd("w.df", 12.0, 6.0)
            .reparam("w.scale_root", nalgebra::DMatrix::identity(3, 3))
            .build()
            .unwrap();
        p.set_value("w.df", 5.0).unwrap();
        let (q, rep) = project(&p, &fam);
        assert!((q.scalar("w.df").unwrap() - (2.0 + 6.0 + 1e-3)).abs() < 1e-12);
        assert_eq!(rep.clipped, vec!["w.df".to_string()]);
    }
}
