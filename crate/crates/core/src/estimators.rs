//! ELBO gradient estimators.
//!
//! Every estimator is a pure function of its [`RandomStream`]. A per-block
//! [`EstimatorPlan`] selects the method used for each parameter block, so a
//! finite-difference estimate for a shape parameter can be combined with a
//! pathwise gradient for its rate. The convenience wrappers
//! ([`vind_gradient`], [`bbvi_gradient`], ...) build the usual plans.
//!
//! Samples are reduced sequentially in draw order, so results are
//! bit-reproducible for a given seed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::RandomStream;
use crate::error::{Error, Result};
use crate::families::{
    sample_centers, sample_joint, BlockKind, FamilySpec, JointDraw, ParamValue, QDensity, Theta, ThetaValue,
    VariationalParams,
};
use crate::models::TargetModel;

/// Identity of an estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    Bbvi,
    BbviRb,
    Reparam,
    Vind,
    VindUncoupled,
    NaiveFd,
    Oracle,
}

impl EstimatorId {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorId::Bbvi => "bbvi",
            EstimatorId::BbviRb => "bbvi_rb",
            EstimatorId::Reparam => "reparam",
            EstimatorId::Vind => "vind",
            EstimatorId::VindUncoupled => "vind_uncoupled",
            EstimatorId::NaiveFd => "naive_fd",
            EstimatorId::Oracle => "oracle",
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "bbvi" => EstimatorId::Bbvi,
            "bbvi_rb" => EstimatorId::BbviRb,
            "reparam" => EstimatorId::Reparam,
            "vind" => EstimatorId::Vind,
            "vind_uncoupled" => EstimatorId::VindUncoupled,
            "naive_fd" => EstimatorId::NaiveFd,
            "oracle" => EstimatorId::Oracle,
            other => return Err(format!("unknown estimator `{other}`")),
        })
    }
}

/// Gradient method for a single block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMethod {
    /// Coupled finite difference with `q` at the unperturbed parameters.
    Vind,
    /// Finite difference from independent draws at the shifted parameters.
    VindUncoupled,
    /// Coupled finite difference with `q` at the shifted parameters.
    NaiveFd,
    /// Score function times the full log-ratio.
    Bbvi,
    /// Score function times `log p - log q_i` of the block's own factor.
    BbviRb,
    /// Pathwise gradient.
    Reparam,
    /// No gradient; the block stays fixed.
    Frozen,
}

impl BlockMethod {
    fn is_fd(self) -> bool {
        matches!(self, BlockMethod::Vind | BlockMethod::VindUncoupled | BlockMethod::NaiveFd)
    }
}

/// One method per block, aligned with the family layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EstimatorPlan {
    pub methods: Vec<BlockMethod>,
}

impl EstimatorPlan {
    pub fn new(methods: Vec<BlockMethod>) -> Self {
        EstimatorPlan { methods }
    }

    /// Finite-difference blocks get `fd`, reparam blocks get `reparam`.
    pub fn by_kind(params: &VariationalParams, fd: BlockMethod, reparam: BlockMethod) -> Self {
        EstimatorPlan {
            methods: params
                .blocks()
                .iter()
                .map(|b| if b.kind.is_fd() { fd } else { reparam })
                .collect(),
        }
    }

    pub fn uniform(params: &VariationalParams, method: BlockMethod) -> Self {
        EstimatorPlan {
            methods: vec![method; params.len()],
        }
    }

    /// Freeze the named block.
    pub fn freeze(mut self, params: &VariationalParams, name: &str) -> Result<Self> {
        let i = params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("no block named `{name}`")))?;
        self.methods[i] = BlockMethod::Frozen;
        Ok(self)
    }

    /// Replace the method of the named block.
    pub fn with(mut self, params: &VariationalParams, name: &str, method: BlockMethod) -> Result<Self> {
        let i = params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("no block named `{name}`")))?;
        self.methods[i] = method;
        Ok(self)
    }

    /// Estimator label for the plan: the first non-pathwise method, else reparam.
    pub fn id(&self) -> EstimatorId {
        for m in &self.methods {
            match m {
                BlockMethod::Vind => return EstimatorId::Vind,
                BlockMethod::VindUncoupled => return EstimatorId::VindUncoupled,
                BlockMethod::NaiveFd => return EstimatorId::NaiveFd,
                BlockMethod::Bbvi => return EstimatorId::Bbvi,
                BlockMethod::BbviRb => return EstimatorId::BbviRb,
                BlockMethod::Reparam | BlockMethod::Frozen => {}
            }
        }
        EstimatorId::Reparam
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGradient {
    pub name: String,
    pub value: ParamValue,
}

/// Per-block gradient estimate. Frozen blocks are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub blocks: Vec<BlockGradient>,
    pub n_samples: usize,
    pub estimator: EstimatorId,
}

impl GradientEstimate {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &b.value)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(ParamValue::scalar)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.value.is_finite())
    }
}

fn estimator_error(msg: impl Into<String>, theta: &Theta) -> Error {
    Error::Estimator {
        msg: msg.into(),
        theta: theta.to_string(),
    }
}

/// `log p(θ) - log q(θ; λ)`, erroring on non-finite values.
fn log_ratio(model: &dyn TargetModel, q: &QDensity, theta: &Theta) -> Result<f64> {
    let lp = model.log_density(theta);
    if !lp.is_finite() {
        return Err(estimator_error(format!("log p is {lp}"), theta));
    }
    let lq = q.log_q(theta);
    if !lq.is_finite() {
        return Err(estimator_error(format!("log q is {lq}"), theta));
    }
    Ok(lp - lq)
}

fn check_plan(model: &dyn TargetModel, params: &VariationalParams, plan: &EstimatorPlan) -> Result<()> {
    if plan.methods.len() != params.len() {
        return Err(Error::Contract(format!(
            "plan has {} methods for {} blocks",
            plan.methods.len(),
            params.len()
        )));
    }
    for (m, b) in plan.methods.iter().zip(params.blocks()) {
        match (m, b.kind) {
            (m, BlockKind::Reparam) if m.is_fd() => {
                return Err(Error::Contract(format!(
                    "block `{}` has no finite-difference step for method {m:?}",
                    b.name
                )))
            }
            (BlockMethod::Reparam, BlockKind::FiniteDifference { .. }) => {
                return Err(Error::Contract(format!("block `{}` is not reparameterizable", b.name)))
            }
            (BlockMethod::Reparam, _) if !model.has_gradient() => {
                return Err(Error::Capability(format!(
                    "pathwise gradient for `{}` needs the model's θ-gradient",
                    b.name
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Parameters with coordinate `coord` of block `b` shifted by `delta`.
fn shifted(params: &VariationalParams, b: usize, coord: usize, delta: f64) -> VariationalParams {
    let mut p = params.clone();
    p.blocks_mut()[b].value.as_mut_slice()[coord] += delta;
    p
}

/// Estimate the ELBO gradient with one method per block from `n` draws.
pub fn estimate(
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    plan: &EstimatorPlan,
    stream: &mut RandomStream,
    n: usize,
) -> Result<GradientEstimate> {
    family.validate(params)?;
    check_plan(model, params, plan)?;
    if n == 0 {
        return Err(Error::Contract("need at least one sample".into()));
    }
    let methods = &plan.methods;
    let q = QDensity::new(family, params)?;
    let blocks = params.blocks();
    let mut acc: Vec<Option<ParamValue>> = methods
        .iter()
        .zip(blocks)
        .map(|(m, b)| (*m != BlockMethod::Frozen).then(|| b.value.zeros_like()))
        .collect();

    let mut subs = stream.split(2);
    let needs_coupling = methods.iter().any(|m| matches!(m, BlockMethod::Vind | BlockMethod::NaiveFd));
    let draws: Vec<JointDraw> = if needs_coupling {
        sample_joint(family, params, &mut subs[0], n)?
    } else {
        sample_centers(family, params, &mut subs[0], n)?
    };

    // q at shifted parameters for naive finite differences, keyed by (block, coord)
    let mut naive_q: Vec<(usize, usize, Option<QDensity>, QDensity)> = Vec::new();
    for (b, m) in methods.iter().enumerate() {
        if *m == BlockMethod::NaiveFd {
            let BlockKind::FiniteDifference { epsilon, one_sided } = blocks[b].kind else {
                unreachable!("checked by plan validation")
            };
            for c in 0..blocks[b].value.len() {
                let minus = if one_sided {
                    None
                } else {
                    Some(QDensity::new(family, &shifted(params, b, c, -epsilon))?)
                };
                let plus = QDensity::new(family, &shifted(params, b, c, epsilon))?;
                naive_q.push((b, c, minus, plus));
            }
        }
    }

    let uses_score = methods.iter().any(|m| matches!(m, BlockMethod::Bbvi | BlockMethod::BbviRb));
    let uses_reparam = methods.iter().any(|m| *m == BlockMethod::Reparam);

    for draw in &draws {
        let lp = model.log_density(&draw.center);
        if !lp.is_finite() {
            return Err(estimator_error(format!("log p is {lp}"), &draw.center));
        }
        let lq = q.log_q(&draw.center);
        if !lq.is_finite() {
            return Err(estimator_error(format!("log q is {lq}"), &draw.center));
        }
        let lr = lp - lq;

        if uses_score {
            for f in 0..q.n_factors() {
                let off = family.block_offset(f);
                let nb = q.factor_score(f, draw.center.get(f));
                for (r, s) in nb.iter().enumerate() {
                    let b = off + r;
                    let w = match methods[b] {
                        BlockMethod::Bbvi => lr,
                        BlockMethod::BbviRb => lp - q.log_q_factor(f, draw.center.get(f)),
                        _ => continue,
                    };
                    if let Some(a) = acc[b].as_mut() {
                        a.axpy(w, s);
                    }
                }
            }
        }

        if uses_reparam {
            let gp = model
                .grad_log_density(&draw.center)
                .ok_or_else(|| Error::Capability("model returned no θ-gradient".into()))?;
            for (b, m) in methods.iter().enumerate() {
                if *m != BlockMethod::Reparam {
                    continue;
                }
                let f = q.factor_of(b);
                let gq = q
                    .grad_theta_factor(f, draw.center.get(f))
                    .ok_or_else(|| Error::Contract(format!("block `{}` has no pathwise form", blocks[b].name)))?;
                let g = theta_sub(gp.get(f), &gq)
                    .ok_or_else(|| Error::Contract("model gradient has the wrong shape".into()))?;
                if !theta_value_finite(&g) {
                    return Err(estimator_error("non-finite θ-gradient", &draw.center));
                }
                let c = q.reparam_contribution(b, &draw.base, &g)?;
                acc[b].as_mut().expect("not frozen").axpy(1.0, &c);
            }
        }

        for pert in &draw.perturbed {
            let b = pert.block;
            let diff = match methods[b] {
                BlockMethod::Vind => log_ratio(model, &q, &pert.plus)? - log_ratio(model, &q, &pert.minus)?,
                BlockMethod::NaiveFd => {
                    let (_, _, qm, qp) = naive_q
                        .iter()
                        .find(|(nb, nc, _, _)| *nb == b && *nc == pert.coord)
                        .expect("prepared above");
                    let lr_plus = log_ratio(model, qp, &pert.plus)?;
                    let lr_minus = log_ratio(model, qm.as_ref().unwrap_or(&q), &pert.minus)?;
                    lr_plus - lr_minus
                }
                _ => continue,
            };
            acc[b].as_mut().expect("not frozen").as_mut_slice()[pert.coord] += pert.weight * diff / pert.divisor;
        }
    }

    // independent draws at the shifted parameters
    for (b, m) in methods.iter().enumerate() {
        if *m != BlockMethod::VindUncoupled {
            continue;
        }
        let BlockKind::FiniteDifference { epsilon, one_sided } = blocks[b].kind else {
            unreachable!("checked by plan validation")
        };
        let divisor = if one_sided { epsilon } else { 2.0 * epsilon };
        for c in 0..blocks[b].value.len() {
            let mut s = subs[1].fork();
            let plus_params = shifted(params, b, c, epsilon);
            let minus_params = if one_sided { params.clone() } else { shifted(params, b, c, -epsilon) };
            let plus = sample_centers(family, &plus_params, &mut s, n)?;
            let minus = sample_centers(family, &minus_params, &mut s, n)?;
            let mut total = 0.0;
            for (dp, dm) in plus.iter().zip(&minus) {
                total += log_ratio(model, &q, &dp.center)? - log_ratio(model, &q, &dm.center)?;
            }
            acc[b].as_mut().expect("not frozen").as_mut_slice()[c] += total / divisor;
        }
    }

    let inv = 1.0 / n as f64;
    let mut out = Vec::new();
    for (b, a) in acc.into_iter().enumerate() {
        if let Some(mut v) = a {
            v.scale(inv);
            if !v.is_finite() {
                return Err(Error::Estimator {
                    msg: format!("non-finite gradient for block `{}`", blocks[b].name),
                    theta: String::new(),
                });
            }
            out.push(BlockGradient {
                name: blocks[b].name.clone(),
                value: v,
            });
        }
    }
    Ok(GradientEstimate {
        blocks: out,
        n_samples: n,
        estimator: plan.id(),
    })
}

fn theta_sub(a: &ThetaValue, b: &ThetaValue) -> Option<ThetaValue> {
    Some(match (a, b) {
        (ThetaValue::Real(x), ThetaValue::Real(y)) => ThetaValue::Real(x - y),
        (ThetaValue::Vector(x), ThetaValue::Vector(y)) if x.len() == y.len() => ThetaValue::Vector(x - y),
        (ThetaValue::Matrix(x), ThetaValue::Matrix(y)) if x.shape() == y.shape() => ThetaValue::Matrix(x - y),
        _ => return None,
    })
}

fn theta_value_finite(v: &ThetaValue) -> bool {
    match v {
        ThetaValue::Real(x) => x.is_finite(),
        ThetaValue::Vector(x) => x.iter().all(|v| v.is_finite()),
        ThetaValue::Matrix(x) => x.iter().all(|v| v.is_finite()),
        ThetaValue::Count(_) => true,
    }
}

fn run(
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
    plan: EstimatorPlan,
    id: EstimatorId,
) -> Result<GradientEstimate> {
    let mut g = estimate(model, family, params, &plan, stream, n)?;
    g.estimator = id;
    Ok(g)
}

/// Score-function gradient for every block.
pub fn bbvi_gradient(
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
) -> Result<GradientEstimate> {
    let plan = EstimatorPlan::uniform(params, BlockMethod::Bbvi);
    run(model, family, params, stream, n, plan, EstimatorId::Bbvi)
}

/// Rao-Blackwellized score gradient for every block.
pub fn bbvi_rb_gradient(
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
) -> Result<GradientEstimate> {
    let plan = EstimatorPlan::uniform(params, BlockMethod::BbviRb);
    run(model, family, params, stream, n, plan, EstimatorId::BbviRb)
}

/// Pathwise gradient for the reparam blocks; finite-difference blocks are
/// left out.
pub fn reparam_gradient(
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
) -> Result<GradientEstimate> {
    let plan = EstimatorPlan::by_kind(params, BlockMethod::Frozen, BlockMethod::Reparam);
    run(model, family, params, stream, n, plan, EstimatorId::Reparam)
}

/// Coupled finite differences for finite-difference blocks, pathwise
/// gradients for the rest.
pub fn vind_gradient(
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
) -> Result<GradientEstimate> {
    let plan = EstimatorPlan::by_kind(params, BlockMethod::Vind, reparam_or_frozen(model));
    run(model, family, params, stream, n, plan, EstimatorId::Vind)
}

/// As [`vind_gradient`] with independent minus and plus draws.
pub fn vind_uncoupled_gradient(
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
) -> Result<GradientEstimate> {
    let plan = EstimatorPlan::by_kind(params, BlockMethod::VindUncoupled, reparam_or_frozen(model));
    run(model, family, params, stream, n, plan, EstimatorId::VindUncoupled)
}

/// Coupled finite differences with `q` evaluated at the shifted parameters.
pub fn naive_fd_gradient(
    model: &dyn TargetModel,
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
) -> Result<GradientEstimate> {
    let plan = EstimatorPlan::by_kind(params, BlockMethod::NaiveFd, reparam_or_frozen(model));
    run(model, family, params, stream, n, plan, EstimatorId::NaiveFd)
}

fn reparam_or_frozen(model: &dyn TargetModel) -> BlockMethod {
    if model.has_gradient() {
        BlockMethod::Reparam
    } else {
        BlockMethod::Frozen
    }
}

/// Plan for an estimator id applied to every block it can handle:
/// finite-difference estimators pair with pathwise gradients, score
/// estimators cover everything.
pub fn plan_for(id: EstimatorId, model: &dyn TargetModel, params: &VariationalParams) -> Result<EstimatorPlan> {
    let other = reparam_or_frozen(model);
    Ok(match id {
        EstimatorId::Bbvi => EstimatorPlan::uniform(params, BlockMethod::Bbvi),
        EstimatorId::BbviRb => EstimatorPlan::uniform(params, BlockMethod::BbviRb),
        EstimatorId::Reparam => EstimatorPlan::by_kind(params, BlockMethod::Frozen, BlockMethod::Reparam),
        EstimatorId::Vind => EstimatorPlan::by_kind(params, BlockMethod::Vind, other),
        EstimatorId::VindUncoupled => EstimatorPlan::by_kind(params, BlockMethod::VindUncoupled, other),
        EstimatorId::NaiveFd => EstimatorPlan::by_kind(params, BlockMethod::NaiveFd, other),
        EstimatorId::Oracle => return Err(Error::Contract("the oracle has no sampling plan".into())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{Factor, FactorKind};
    use crate::models::{FamilyTarget, GammaNormal, GammaNormalData};

    fn gamma_setup() -> (GammaNormal, FamilySpec, VariationalParams) {
        let data = GammaNormalData::new(vec![0.5, -1.0, 0.3, 2.0], 0.0, 5.0, 5.0).unwrap();
        let model = GammaNormal::new(data);
        let fam = FamilySpec::new(vec![Factor::new("tau", FactorKind::Gamma)]).unwrap();
        let (_, b) = model.posterior();
        let p = fam.builder().fd("tau.shape", 4.0, 1.0).reparam("tau.rate", b).build().unwrap();
        (model, fam, p)
    }

    #[test]
    fn determinism() {
        let (m, f, p) = gamma_setup();
        let a = vind_gradient(&m, &f, &p, &mut RandomStream::new(1), 5).unwrap();
        let b = vind_gradient(&m, &f, &p, &mut RandomStream::new(1), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.estimator, EstimatorId::Vind);
        assert_eq!(a.blocks.len(), 2);
    }

    #[test]
    fn single_factor_rb_equals_bbvi() {
        let (m, f, p) = gamma_setup();
        let a = bbvi_gradient(&m, &f, &p, &mut RandomStream::new(2), 7).unwrap();
        let b = bbvi_rb_gradient(&m, &f, &p, &mut RandomStream::new(2), 7).unwrap();
        for (x, y) in a.blocks.iter().zip(&b.blocks) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn p_equals_q_gives_zero_vind_each_draw() {
        // with p = q the log-ratio is identically zero
        let (_, f, p) = gamma_setup();
        let t = FamilyTarget::new(&f, &p).unwrap();
        let g = vind_gradient(&t, &f, &p, &mut RandomStream::new(3), 10).unwrap();
        assert!(g.scalar("tau.shape").unwrap().abs() < 1e-9);
        assert!(g.scalar("tau.rate").unwrap().abs() < 1e-9);
    }

    #[test]
    fn reparam_requires_gradient() {
        let (_, f, p) = gamma_setup();
        let t = crate::models::FnTarget::new(|th: &Theta| -th.0[0].real().unwrap());
        assert!(matches!(
            reparam_gradient(&t, &f, &p, &mut RandomStream::new(4), 3),
            Err(Error::Capability(_))
        ));
        // VIND falls back to freezing the rate
        let g = vind_gradient(&t, &f, &p, &mut RandomStream::new(4), 3).unwrap();
        assert!(g.get("tau.rate").is_none());
    }

    #[test]
    fn non_finite_log_p_aborts() {
        let (_, f, p) = gamma_setup();
        let t = crate::models::FnTarget::new(|th: &Theta| {
            if th.0[0].real().unwrap() > 0.5 {
                f64::NAN
            } else {
                0.0
            }
        });
        let e = bbvi_gradient(&t, &f, &p, &mut RandomStream::new(5), 100).unwrap_err();
        assert!(matches!(e, Error::Estimator { .. }));
    }
}
