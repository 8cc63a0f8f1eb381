//! Mean-field variational families built from parameter blocks.
//!
//! A [`FamilySpec`] is an ordered list of factors. Each factor owns a fixed
//! set of parameter blocks named `"<factor>.<role>"`, for instance
//! `"tau.shape"` and `"tau.rate"` for a Gamma factor called `tau`. Every block
//! is tagged [`BlockKind::Reparam`] or [`BlockKind::FiniteDifference`].
//!
//! Draws are assembled into a [`Theta`], one [`ThetaValue`] per factor in
//! factor order.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::couplings::{
    couple_beta_with, couple_dirichlet_with, couple_gamma_with, couple_poisson_with, couple_student_mv_with,
    couple_wishart_with, PoissonMode, Stencil, StudentNormalization,
};
use crate::distributions::special::{
    digamma_unchecked as digamma, ln_gamma_unchecked as ln_gamma, ln_mv_gamma_unchecked, mv_digamma_unchecked,
};
use crate::distributions::{
    inverse_spd, ln_det_spd, sample_poisson_unchecked, sample_std_normal_vec, sample_unit_gamma,
    wishart_identity_unchecked, RandomStream,
};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Margin kept between a finite-difference block and its domain boundary.
pub const DOMAIN_MARGIN: f64 = 1e-3;

/// Value of a parameter block.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamValue {
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

impl ParamValue {
    /// Number of real coordinates.
    pub fn len(&self) -> usize {
        self.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates in column-major order.
    pub fn as_slice(&self) -> &[f64] {
        match self {
            ParamValue::Scalar(x) => std::slice::from_ref(x),
            ParamValue::Vector(v) => v.as_slice(),
            ParamValue::Matrix(m) => m.as_slice(),
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            ParamValue::Scalar(x) => std::slice::from_mut(x),
            ParamValue::Vector(v) => v.as_mut_slice(),
            ParamValue::Matrix(m) => m.as_mut_slice(),
        }
    }

    pub fn zeros_like(&self) -> ParamValue {
        match self {
            ParamValue::Scalar(_) => ParamValue::Scalar(0.0),
            ParamValue::Vector(v) => ParamValue::Vector(DVector::zeros(v.len())),
            ParamValue::Matrix(m) => ParamValue::Matrix(DMatrix::zeros(m.nrows(), m.ncols())),
        }
    }

    pub fn same_shape(&self, other: &ParamValue) -> bool {
        match (self, other) {
            (ParamValue::Scalar(_), ParamValue::Scalar(_)) => true,
            (ParamValue::Vector(a), ParamValue::Vector(b)) => a.len() == b.len(),
            (ParamValue::Matrix(a), ParamValue::Matrix(b)) => a.shape() == b.shape(),
            _ => false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }

    pub fn scalar(&self) -> Option<f64> {
        match self {
            ParamValue::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    pub fn vector(&self) -> Option<&DVector<f64>> {
        match self {
            ParamValue::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            ParamValue::Matrix(m) => Some(m),
            _ => None,
        }
    }

    /// `self += k * other`; shapes must agree.
    pub fn axpy(&mut self, k: f64, other: &ParamValue) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *a += k * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.as_mut_slice() {
            *a *= k;
        }
    }

    fn expect_scalar(&self, what: &str) -> Result<f64> {
        self.scalar()
            .ok_or_else(|| Error::Contract(format!("{what}: expected a scalar block")))
    }

    fn expect_vector(&self, what: &str, dim: usize) -> Result<&DVector<f64>> {
        match self {
            ParamValue::Vector(v) if v.len() == dim => Ok(v),
            _ => Err(Error::Contract(format!("{what}: expected a vector of length {dim}"))),
        }
    }

    fn expect_matrix(&self, what: &str, dim: usize) -> Result<&DMatrix<f64>> {
        match self {
            ParamValue::Matrix(m) if m.shape() == (dim, dim) => Ok(m),
            _ => Err(Error::Contract(format!("{what}: expected a {dim}x{dim} matrix"))),
        }
    }
}

impl From<f64> for ParamValue {
    fn from(x: f64) -> Self {
        ParamValue::Scalar(x)
    }
}

impl From<DVector<f64>> for ParamValue {
    fn from(v: DVector<f64>) -> Self {
        ParamValue::Vector(v)
    }
}

impl From<Vec<f64>> for ParamValue {
    fn from(v: Vec<f64>) -> Self {
        ParamValue::Vector(DVector::from_vec(v))
    }
}

impl From<DMatrix<f64>> for ParamValue {
    fn from(m: DMatrix<f64>) -> Self {
        ParamValue::Matrix(m)
    }
}

/// Constraint a block value must satisfy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Domain {
    Real,
    /// Every coordinate strictly positive.
    Positive,
    /// Symmetric positive definite matrix.
    SymmetricPd,
    /// Wishart degrees of freedom, `df > dim - 1`.
    WishartDf { dim: usize },
}

impl Domain {
    /// Strict lower bound on each coordinate, if any.
    pub fn lower_bound(&self) -> Option<f64> {
        match self {
            Domain::Real | Domain::SymmetricPd => None,
            Domain::Positive => Some(0.0),
            Domain::WishartDf { dim } => Some(*dim as f64 - 1.0),
        }
    }

    pub fn contains(&self, v: &ParamValue) -> bool {
        if !v.is_finite() {
            return false;
        }
        match self {
            Domain::Real => true,
            Domain::Positive | Domain::WishartDf { .. } => {
                let lo = self.lower_bound().unwrap_or(f64::NEG_INFINITY);
                v.as_slice().iter().all(|&x| x > lo)
            }
            Domain::SymmetricPd => match v.matrix() {
                Some(m) => {
                    let scale = m.amax().max(f64::MIN_POSITIVE);
                    (m - m.transpose()).amax() <= 1e-10 * scale && ln_det_spd(m).is_some()
                }
                None => false,
            },
        }
    }
}

/// How the gradient of a block is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlockKind {
    /// Pathwise gradient through the sampler.
    Reparam,
    /// Coupled finite difference with step `epsilon`. `one_sided` selects the
    /// forward stencil.
    FiniteDifference { epsilon: f64, one_sided: bool },
}

impl BlockKind {
    pub fn fd(epsilon: f64) -> Self {
        BlockKind::FiniteDifference {
            epsilon,
            one_sided: false,
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self {
            BlockKind::FiniteDifference { epsilon, .. } => Some(*epsilon),
            BlockKind::Reparam => None,
        }
    }

    pub fn is_fd(&self) -> bool {
        matches!(self, BlockKind::FiniteDifference { .. })
    }

    fn stencil(&self) -> Stencil {
        match self {
            BlockKind::FiniteDifference { one_sided: true, .. } => Stencil::Forward,
            _ => Stencil::Central,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub kind: BlockKind,
    pub value: ParamValue,
    pub domain: Domain,
}

impl ParamBlock {
    /// Whether `value - ε` keeps every coordinate inside the domain with the
    /// standard margin. Always true for reparam blocks and unbounded domains.
    pub fn two_sided_valid(&self) -> bool {
        let (Some(eps), Some(lo)) = (self.kind.epsilon(), self.domain.lower_bound()) else {
            return true;
        };
        self.value.as_slice().iter().all(|&x| x - eps >= lo + DOMAIN_MARGIN - 1e-12)
    }
}

/// Ordered parameter blocks of a family.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    blocks: Vec<ParamBlock>,
}

impl VariationalParams {
    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn value(&self, name: &str) -> Option<&ParamValue> {
        self.block(name).map(|b| &b.value)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.value(name).and_then(ParamValue::scalar)
    }

    /// Replace a block value. The caller is responsible for the domain.
    pub fn set_value(&mut self, name: &str, value: impl Into<ParamValue>) -> Result<()> {
        let value = value.into();
        let b = self
            .blocks
            .iter_mut()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Contract(format!("no block named `{name}`")))?;
        if !b.value.same_shape(&value) {
            return Err(Error::Contract(format!("shape mismatch for block `{name}`")));
        }
        b.value = value;
        Ok(())
    }

    pub fn set_kind(&mut self, name: &str, kind: BlockKind) -> Result<()> {
        let b = self
            .blocks
            .iter_mut()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Contract(format!("no block named `{name}`")))?;
        b.kind = kind;
        Ok(())
    }
}

/// Kind of a mean-field factor and its dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FactorKind {
    /// `θ = loc + scale ∘ Z`; blocks `loc` (vector) and `scale` (standard
    /// deviations; a scalar when `spherical`).
    GaussianDiag { dim: usize, spherical: bool },
    /// Gamma(shape, rate); blocks `shape` (finite-difference) and `rate`.
    Gamma,
    /// Beta(alpha, beta); both blocks finite-difference.
    Beta,
    /// Dirichlet; block `concentration` (finite-difference, per coordinate).
    Dirichlet { dim: usize },
    /// Wishart W(df, C²); blocks `df` (finite-difference) and `scale_root` C.
    Wishart { dim: usize },
    /// Multivariate Student; blocks `df` (finite-difference), `loc`, `scale`.
    StudentMv {
        dim: usize,
        normalization: StudentNormalization,
    },
    /// Poisson; block `rate` (finite-difference).
    Poisson { mode: PoissonMode },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FdRule {
    Required,
    Optional,
    Forbidden,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize),
}

#[derive(Clone, Copy, Debug)]
struct Role {
    suffix: &'static str,
    shape: Shape,
    domain: Domain,
    fd: FdRule,
}

impl FactorKind {
    fn roles(&self) -> Vec<Role> {
        use FdRule::*;
        let role = |suffix, shape, domain, fd| Role {
            suffix,
            shape,
            domain,
            fd,
        };
        match *self {
            FactorKind::GaussianDiag { dim, spherical } => vec![
                role("loc", Shape::Vector(dim), Domain::Real, Optional),
                role(
                    "scale",
                    if spherical { Shape::Scalar } else { Shape::Vector(dim) },
                    Domain::Positive,
                    Optional,
                ),
            ],
            FactorKind::Gamma => vec![
                role("shape", Shape::Scalar, Domain::Positive, Required),
                role("rate", Shape::Scalar, Domain::Positive, Optional),
            ],
            FactorKind::Beta => vec![
                role("alpha", Shape::Scalar, Domain::Positive, Required),
                role("beta", Shape::Scalar, Domain::Positive, Required),
            ],
            FactorKind::Dirichlet { dim } => {
                vec![role("concentration", Shape::Vector(dim), Domain::Positive, Required)]
            }
            FactorKind::Wishart { dim } => vec![
                role("df", Shape::Scalar, Domain::WishartDf { dim }, Required),
                role("scale_root", Shape::Matrix(dim), Domain::SymmetricPd, Forbidden),
            ],
            FactorKind::StudentMv { dim, .. } => vec![
                role("df", Shape::Scalar, Domain::Positive, Required),
                role("loc", Shape::Vector(dim), Domain::Real, Forbidden),
                role("scale", Shape::Matrix(dim), Domain::SymmetricPd, Forbidden),
            ],
            FactorKind::Poisson { .. } => vec![role("rate", Shape::Scalar, Domain::Positive, Required)],
        }
    }

    fn dim(&self) -> usize {
        match *self {
            FactorKind::GaussianDiag { dim, .. }
            | FactorKind::Dirichlet { dim }
            | FactorKind::Wishart { dim }
            | FactorKind::StudentMv { dim, .. } => dim,
            FactorKind::Gamma | FactorKind::Beta | FactorKind::Poisson { .. } => 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FactorKind::GaussianDiag { .. } => "gaussian-diag",
            FactorKind::Gamma => "gamma",
            FactorKind::Beta => "beta",
            FactorKind::Dirichlet { .. } => "dirichlet",
            FactorKind::Wishart { .. } => "wishart",
            FactorKind::StudentMv { .. } => "student-mv",
            FactorKind::Poisson { .. } => "poisson",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub name: String,
    pub kind: FactorKind,
}

impl Factor {
    pub fn new(name: impl Into<String>, kind: FactorKind) -> Self {
        Factor {
            name: name.into(),
            kind,
        }
    }
}

/// Position of a block inside the family.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSlot {
    pub name: String,
    pub factor: usize,
    pub role: usize,
    pub domain: Domain,
}

/// A mean-field product of factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilySpec {
    factors: Vec<Factor>,
    layout: Vec<BlockSlot>,
    offsets: Vec<usize>,
}

impl FamilySpec {
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Contract("a family needs at least one factor".into()));
        }
        let mut layout = Vec::new();
        let mut offsets = Vec::new();
        for (fi, f) in factors.iter().enumerate() {
            if f.name.is_empty() || f.name.contains('.') {
                return Err(Error::Contract(format!("invalid factor name `{}`", f.name)));
            }
            if factors[..fi].iter().any(|g| g.name == f.name) {
                return Err(Error::Contract(format!("duplicate factor name `{}`", f.name)));
            }
            let min_dim = if matches!(f.kind, FactorKind::Dirichlet { .. }) { 2 } else { 1 };
            if f.kind.dim() < min_dim {
                return Err(Error::Contract(format!("factor `{}` has invalid dimension", f.name)));
            }
            offsets.push(layout.len());
            for (ri, r) in f.kind.roles().iter().enumerate() {
                layout.push(BlockSlot {
                    name: format!("{}.{}", f.name, r.suffix),
                    factor: fi,
                    role: ri,
                    domain: r.domain,
                });
            }
        }
        Ok(FamilySpec {
            factors,
            layout,
            offsets,
        })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn layout(&self) -> &[BlockSlot] {
        &self.layout
    }

    pub fn n_blocks(&self) -> usize {
        self.layout.len()
    }

    /// Index of the first block of factor `f`.
    pub fn block_offset(&self, f: usize) -> usize {
        self.offsets[f]
    }

    pub fn builder(&self) -> ParamsBuilder<'_> {
        ParamsBuilder {
            family: self,
            entries: HashMap::new(),
            order: Vec::new(),
        }
    }

    /// Check block names, shapes, kinds, step sizes and domains.
    pub fn validate(&self, params: &VariationalParams) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::Contract(format!(
                "expected {} blocks, got {}",
                self.layout.len(),
                params.len()
            )));
        }
        for (slot, b) in self.layout.iter().zip(params.blocks()) {
            if slot.name != b.name {
                return Err(Error::Contract(format!("expected block `{}`, found `{}`", slot.name, b.name)));
            }
            let role = self.factors[slot.factor].kind.roles()[slot.role];
            check_block(&role, b)?;
        }
        Ok(())
    }

    fn check_theta(&self, theta: &Theta) -> Result<()> {
        if theta.0.len() != self.factors.len() {
            return Err(Error::Contract(format!(
                "theta has {} components, family has {} factors",
                theta.0.len(),
                self.factors.len()
            )));
        }
        for (f, v) in self.factors.iter().zip(&theta.0) {
            let ok = match (f.kind, v) {
                (FactorKind::GaussianDiag { dim, .. }, ThetaValue::Vector(x))
                | (FactorKind::Dirichlet { dim }, ThetaValue::Vector(x))
                | (FactorKind::StudentMv { dim, .. }, ThetaValue::Vector(x)) => x.len() == dim,
                (FactorKind::Gamma | FactorKind::Beta, ThetaValue::Real(_)) => true,
                (FactorKind::Wishart { dim }, ThetaValue::Matrix(m)) => m.shape() == (dim, dim),
                (FactorKind::Poisson { .. }, ThetaValue::Count(_)) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Contract(format!("theta component for `{}` has the wrong type", f.name)));
            }
        }
        Ok(())
    }
}

fn check_block(role: &Role, b: &ParamBlock) -> Result<()> {
    let shape_ok = match (role.shape, &b.value) {
        (Shape::Scalar, ParamValue::Scalar(_)) => true,
        (Shape::Vector(d), ParamValue::Vector(v)) => v.len() == d,
        (Shape::Matrix(d), ParamValue::Matrix(m)) => m.shape() == (d, d),
        _ => false,
    };
    if !shape_ok {
        return Err(Error::Contract(format!("block `{}` has shape {:?}", b.name, role.shape)));
    }
    match (role.fd, b.kind) {
        (FdRule::Required, BlockKind::Reparam) => {
            return Err(Error::Contract(format!(
                "block `{}` cannot be reparameterized; give it a finite-difference step",
                b.name
            )))
        }
        (FdRule::Forbidden, BlockKind::FiniteDifference { .. }) => {
            return Err(Error::Contract(format!("block `{}` must be reparameterized", b.name)))
        }
        _ => {}
    }
    if let Some(eps) = b.kind.epsilon() {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Contract(format!("block `{}` has non-positive epsilon {eps}", b.name)));
        }
    }
    if !b.domain.contains(&b.value) {
        return Err(Error::domain("validate", format!("block `{}` is outside its domain", b.name)));
    }
    Ok(())
}

/// Collects block values by name and builds validated [`VariationalParams`].
pub struct ParamsBuilder<'a> {
    family: &'a FamilySpec,
    entries: HashMap<String, (ParamValue, BlockKind)>,
    order: Vec<String>,
}

impl ParamsBuilder<'_> {
    pub fn set(mut self, name: &str, value: impl Into<ParamValue>, kind: BlockKind) -> Self {
        if self.entries.insert(name.to_string(), (value.into(), kind)).is_none() {
            self.order.push(name.to_string());
        }
        self
    }

    pub fn reparam(self, name: &str, value: impl Into<ParamValue>) -> Self {
        self.set(name, value, BlockKind::Reparam)
    }

    pub fn fd(self, name: &str, value: impl Into<ParamValue>, epsilon: f64) -> Self {
        self.set(name, value, BlockKind::fd(epsilon))
    }

    pub fn fd_one_sided(self, name: &str, value: impl Into<ParamValue>, epsilon: f64) -> Self {
        self.set(
            name,
            value,
            BlockKind::FiniteDifference {
                epsilon,
                one_sided: true,
            },
        )
    }

    pub fn build(mut self) -> Result<VariationalParams> {
        if let Some(extra) = self.order.iter().find(|n| !self.family.layout.iter().any(|s| &s.name == *n)) {
            return Err(Error::Contract(format!("unknown block `{extra}`")));
        }
        let mut blocks = Vec::with_capacity(self.family.layout.len());
        for slot in &self.family.layout {
            let (value, kind) = self
                .entries
                .remove(&slot.name)
                .ok_or_else(|| Error::Contract(format!("missing block `{}`", slot.name)))?;
            blocks.push(ParamBlock {
                name: slot.name.clone(),
                kind,
                value,
                domain: slot.domain,
            });
        }
        let params = VariationalParams { blocks };
        self.family.validate(&params)?;
        Ok(params)
    }
}

/// One factor's component of a draw.
#[derive(Clone, Debug, PartialEq)]
pub enum ThetaValue {
    Real(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
    Count(u64),
}

impl ThetaValue {
    pub fn real(&self) -> Option<f64> {
        match self {
            ThetaValue::Real(x) => Some(*x),
            _ => None,
        }
    }

    pub fn vector(&self) -> Option<&DVector<f64>> {
        match self {
            ThetaValue::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            ThetaValue::Matrix(m) => Some(m),
            _ => None,
        }
    }

    pub fn count(&self) -> Option<u64> {
        match self {
            ThetaValue::Count(k) => Some(*k),
            _ => None,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            ThetaValue::Real(x) => x.is_finite(),
            ThetaValue::Vector(v) => v.iter().all(|x| x.is_finite()),
            ThetaValue::Matrix(m) => m.iter().all(|x| x.is_finite()),
            ThetaValue::Count(_) => true,
        }
    }
}

/// A full draw, one component per factor in factor order.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta(pub Vec<ThetaValue>);

impl Theta {
    pub fn get(&self, f: usize) -> &ThetaValue {
        &self.0[f]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(ThetaValue::is_finite)
    }
}

impl fmt::Display for Theta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            match v {
                ThetaValue::Real(x) => write!(f, "{x}")?,
                ThetaValue::Count(k) => write!(f, "{k}")?,
                ThetaValue::Vector(x) => write!(f, "{:?}", x.as_slice())?,
                ThetaValue::Matrix(m) => write!(f, "{:?}", m.as_slice())?,
            }
        }
        write!(f, "]")
    }
}

/// Base randomness behind a factor's centre draw, kept for pathwise gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum FactorBase {
    None,
    /// Standard normal noise, `θ = loc + scale ∘ z`.
    Gaussian { z: DVector<f64> },
    /// Unit-rate Gamma, `θ = g / rate`.
    Gamma { g: f64 },
    /// Unit-scale Wishart, `θ = C w C`.
    Wishart { w: DMatrix<f64> },
    /// Normal direction and chi-square sum, `θ = loc + S z / sqrt(c / df)`.
    Student { z: DVector<f64>, c: f64 },
}

/// Minus/plus assemblies for one coordinate of one finite-difference block.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub block: usize,
    pub coord: usize,
    pub minus: Theta,
    pub plus: Theta,
    /// Factor in front of `(lr₊ - lr₋) / divisor`; below one only for the
    /// conditioned Poisson coupling.
    pub weight: f64,
    pub divisor: f64,
}

/// One joint draw from the coupled family.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDraw {
    pub center: Theta,
    pub perturbed: Vec<Perturbation>,
    pub base: Vec<FactorBase>,
}

struct LocalPerturbation {
    role: usize,
    coord: usize,
    minus: ThetaValue,
    plus: ThetaValue,
    weight: f64,
    divisor: f64,
}

struct FactorDraw {
    center: ThetaValue,
    base: FactorBase,
    perturbed: Vec<LocalPerturbation>,
}

fn rename_boundary(factor: &str, e: Error) -> Error {
    match e {
        Error::Boundary { param, msg } => Error::Boundary {
            param: format!("{factor}.{param}"),
            msg,
        },
        other => other,
    }
}

fn boundary_check(name: &str, value: f64, kind: &BlockKind) -> Result<()> {
    if let BlockKind::FiniteDifference {
        epsilon,
        one_sided: false,
    } = kind
    {
        if value <= *epsilon {
            return Err(Error::boundary(
                name,
                format!("value {value} must exceed epsilon = {epsilon} for a central difference"),
            ));
        }
    }
    Ok(())
}

fn fd_pair(kind: &BlockKind) -> Option<(f64, Stencil)> {
    kind.epsilon().map(|e| (e, kind.stencil()))
}

/// Draw one factor. With `coupled = false` only the centre is drawn, directly
/// from the family, so finite-difference preconditions do not apply.
fn draw_factor(
    stream: &mut RandomStream,
    factor: &Factor,
    blocks: &[ParamBlock],
    coupled: bool,
) -> Result<FactorDraw> {
    let name = factor.name.as_str();
    let fd = |i: usize| if coupled { fd_pair(&blocks[i].kind) } else { None };
    let mut perturbed = Vec::new();
    let draw = match factor.kind {
        FactorKind::GaussianDiag { dim, spherical } => {
            let loc = blocks[0].value.expect_vector(name, dim)?;
            let sd = gaussian_sd(&blocks[1].value, dim, spherical, name)?;
            let z = sample_std_normal_vec(stream, dim)?;
            let center = loc + sd.component_mul(&z);
            if let Some((eps, st)) = fd(0) {
                for j in 0..dim {
                    let mut plus = center.clone();
                    plus[j] += eps;
                    let mut minus = center.clone();
                    if st == Stencil::Central {
                        minus[j] -= eps;
                    }
                    perturbed.push(LocalPerturbation {
                        role: 0,
                        coord: j,
                        minus: ThetaValue::Vector(minus),
                        plus: ThetaValue::Vector(plus),
                        weight: 1.0,
                        divisor: st.divisor(eps),
                    });
                }
            }
            if let Some((eps, st)) = fd(1) {
                let coords = if spherical { 1 } else { dim };
                for j in 0..coords {
                    let sj = blocks[1].value.as_slice()[j];
                    boundary_check(&blocks[1].name, sj, &blocks[1].kind)?;
                    let shifted = |delta: f64| {
                        let mut s = sd.clone();
                        if spherical {
                            s.add_scalar_mut(delta);
                        } else {
                            s[j] += delta;
                        }
                        loc + s.component_mul(&z)
                    };
                    let minus = if st == Stencil::Central { shifted(-eps) } else { center.clone() };
                    perturbed.push(LocalPerturbation {
                        role: 1,
                        coord: j,
                        minus: ThetaValue::Vector(minus),
                        plus: ThetaValue::Vector(shifted(eps)),
                        weight: 1.0,
                        divisor: st.divisor(eps),
                    });
                }
            }
            FactorDraw {
                center: ThetaValue::Vector(center),
                base: FactorBase::Gaussian { z },
                perturbed,
            }
        }
        FactorKind::Gamma => {
            let alpha = blocks[0].value.expect_scalar(name)?;
            let beta = blocks[1].value.expect_scalar(name)?;
            let g = match fd(0) {
                Some((eps, st)) => {
                    let (t, base) = couple_gamma_with(stream, alpha, beta, eps, st)?;
                    perturbed.push(LocalPerturbation {
                        role: 0,
                        coord: 0,
                        minus: ThetaValue::Real(t.minus),
                        plus: ThetaValue::Real(t.plus),
                        weight: 1.0,
                        divisor: t.divisor(),
                    });
                    base.center_sum()
                }
                None => sample_unit_gamma(stream, alpha),
            };
            if let Some((eps, st)) = fd(1) {
                boundary_check(&blocks[1].name, beta, &blocks[1].kind)?;
                let minus = if st == Stencil::Central { g / (beta - eps) } else { g / beta };
                perturbed.push(LocalPerturbation {
                    role: 1,
                    coord: 0,
                    minus: ThetaValue::Real(minus),
                    plus: ThetaValue::Real(g / (beta + eps)),
                    weight: 1.0,
                    divisor: st.divisor(eps),
                });
            }
            FactorDraw {
                center: ThetaValue::Real(g / beta),
                base: FactorBase::Gamma { g },
                perturbed,
            }
        }
        FactorKind::Beta => {
            let a = blocks[0].value.expect_scalar(name)?;
            let b = blocks[1].value.expect_scalar(name)?;
            let center = match (fd(0), fd(1)) {
                (Some(pa), Some(pb)) => {
                    let (ta, tb) = couple_beta_with(stream, a, b, pa, pb)?;
                    for (role, t) in [(0, &ta), (1, &tb)] {
                        perturbed.push(LocalPerturbation {
                            role,
                            coord: 0,
                            minus: ThetaValue::Real(t.minus),
                            plus: ThetaValue::Real(t.plus),
                            weight: 1.0,
                            divisor: t.divisor(),
                        });
                    }
                    ta.center
                }
                _ => {
                    let ga = sample_unit_gamma(stream, a);
                    let gb = sample_unit_gamma(stream, b);
                    ga / (ga + gb)
                }
            };
            FactorDraw {
                center: ThetaValue::Real(center),
                base: FactorBase::None,
                perturbed,
            }
        }
        FactorKind::Dirichlet { dim } => {
            let alpha = blocks[0].value.expect_vector(name, dim)?;
            let center = match fd(0) {
                Some((eps, st)) => {
                    let c = couple_dirichlet_with(stream, alpha, eps, st)?;
                    let divisor = st.divisor(eps);
                    for (j, (lo, hi)) in c.pairs.into_iter().enumerate() {
                        perturbed.push(LocalPerturbation {
                            role: 0,
                            coord: j,
                            minus: ThetaValue::Vector(lo),
                            plus: ThetaValue::Vector(hi),
                            weight: 1.0,
                            divisor,
                        });
                    }
                    c.center
                }
                None => {
                    let g = DVector::from_iterator(dim, alpha.iter().map(|&a| sample_unit_gamma(stream, a)));
                    let s = g.sum();
                    g / s
                }
            };
            FactorDraw {
                center: ThetaValue::Vector(center),
                base: FactorBase::None,
                perturbed,
            }
        }
        FactorKind::Wishart { dim } => {
            let d = blocks[0].value.expect_scalar(name)?;
            let c = blocks[1].value.expect_matrix(name, dim)?;
            match fd(0) {
                Some((eps, st)) => {
                    let (t, base) = couple_wishart_with(stream, d, c, eps, st)?;
                    let divisor = t.divisor();
                    perturbed.push(LocalPerturbation {
                        role: 0,
                        coord: 0,
                        minus: ThetaValue::Matrix(t.minus.into_inner()),
                        plus: ThetaValue::Matrix(t.plus.into_inner()),
                        weight: 1.0,
                        divisor,
                    });
                    FactorDraw {
                        center: ThetaValue::Matrix(t.center.into_inner()),
                        base: FactorBase::Wishart { w: base.w_center },
                        perturbed,
                    }
                }
                None => {
                    let w = wishart_identity_unchecked(stream, d, dim).into_inner();
                    let s = crate::distributions::symmetrize(&(c * &w * c));
                    FactorDraw {
                        center: ThetaValue::Matrix(s),
                        base: FactorBase::Wishart { w },
                        perturbed,
                    }
                }
            }
        }
        FactorKind::StudentMv { dim, normalization } => {
            let d = blocks[0].value.expect_scalar(name)?;
            let mu = blocks[1].value.expect_vector(name, dim)?;
            let s = blocks[2].value.expect_matrix(name, dim)?;
            match fd(0) {
                Some((eps, st)) => {
                    let (t, base) = couple_student_mv_with(stream, d, mu, s, eps, st, normalization)?;
                    perturbed.push(LocalPerturbation {
                        role: 0,
                        coord: 0,
                        minus: ThetaValue::Vector(t.minus),
                        plus: ThetaValue::Vector(t.plus),
                        weight: 1.0,
                        divisor: st.divisor(eps),
                    });
                    FactorDraw {
                        center: ThetaValue::Vector(t.center),
                        base: FactorBase::Student {
                            z: base.z,
                            c: base.c_center,
                        },
                        perturbed,
                    }
                }
                None => {
                    let c = 2.0 * sample_unit_gamma(stream, d / 2.0);
                    let z = sample_std_normal_vec(stream, dim)?;
                    let center = mu + s * &z / (c / d).sqrt();
                    FactorDraw {
                        center: ThetaValue::Vector(center),
                        base: FactorBase::Student { z, c },
                        perturbed,
                    }
                }
            }
        }
        FactorKind::Poisson { mode } => {
            let rate = blocks[0].value.expect_scalar(name)?;
            match fd(0) {
                Some((eps, st)) => {
                    let c = couple_poisson_with(stream, rate, eps, mode, st)?;
                    perturbed.push(LocalPerturbation {
                        role: 0,
                        coord: 0,
                        minus: ThetaValue::Count(c.triple.minus),
                        plus: ThetaValue::Count(c.triple.plus),
                        weight: c.mass_factor(),
                        divisor: c.triple.divisor(),
                    });
                    FactorDraw {
                        center: ThetaValue::Count(c.triple.center),
                        base: FactorBase::None,
                        perturbed,
                    }
                }
                None => FactorDraw {
                    center: ThetaValue::Count(sample_poisson_unchecked(stream, rate)),
                    base: FactorBase::None,
                    perturbed,
                },
            }
        }
    };
    Ok(draw)
}

fn gaussian_sd(v: &ParamValue, dim: usize, spherical: bool, name: &str) -> Result<DVector<f64>> {
    if spherical {
        Ok(DVector::from_element(dim, v.expect_scalar(name)?))
    } else {
        Ok(v.expect_vector(name, dim)?.clone())
    }
}

fn draw_batch(
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
    coupled: bool,
) -> Result<Vec<JointDraw>> {
    family.validate(params)?;
    let nf = family.factors.len();
    let mut subs = stream.split(nf);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut draws = Vec::with_capacity(nf);
        for (fi, f) in family.factors.iter().enumerate() {
            let off = family.offsets[fi];
            let nroles = f.kind.roles().len();
            let d = draw_factor(&mut subs[fi], f, &params.blocks[off..off + nroles], coupled)
                .map_err(|e| rename_boundary(&f.name, e))?;
            draws.push(d);
        }
        let center = Theta(draws.iter().map(|d| d.center.clone()).collect());
        let mut perturbed = Vec::new();
        for (fi, d) in draws.iter_mut().enumerate() {
            for lp in d.perturbed.drain(..) {
                let mut minus = center.clone();
                minus.0[fi] = lp.minus;
                let mut plus = center.clone();
                plus.0[fi] = lp.plus;
                perturbed.push(Perturbation {
                    block: family.offsets[fi] + lp.role,
                    coord: lp.coord,
                    minus,
                    plus,
                    weight: lp.weight,
                    divisor: lp.divisor,
                });
            }
        }
        out.push(JointDraw {
            center,
            perturbed,
            base: draws.into_iter().map(|d| d.base).collect(),
        });
    }
    Ok(out)
}

/// `n` independent coupled draws. Factors use independent sub-streams; every
/// finite-difference block contributes one [`Perturbation`] per coordinate.
pub fn sample_joint(
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
) -> Result<Vec<JointDraw>> {
    draw_batch(family, params, stream, n, true)
}

/// `n` independent centre draws with their base randomness and no
/// perturbations. Finite-difference step sizes play no role.
pub fn sample_centers(
    family: &FamilySpec,
    params: &VariationalParams,
    stream: &mut RandomStream,
    n: usize,
) -> Result<Vec<JointDraw>> {
    draw_batch(family, params, stream, n, false)
}

/// Per-factor density state at fixed parameters.
#[derive(Clone, Debug)]
enum FactorQ {
    Gaussian {
        mean: DVector<f64>,
        sd: DVector<f64>,
        spherical: bool,
    },
    Gamma {
        shape: f64,
        rate: f64,
        norm: f64,
        psi: f64,
    },
    Beta {
        a: f64,
        b: f64,
        norm: f64,
        psi_a: f64,
        psi_b: f64,
        psi_ab: f64,
    },
    Dirichlet {
        alpha: DVector<f64>,
        norm: f64,
        psi: DVector<f64>,
        psi_sum: f64,
    },
    Wishart {
        df: f64,
        c: DMatrix<f64>,
        c_inv: DMatrix<f64>,
        v_inv: DMatrix<f64>,
        ln_det_v: f64,
        norm: f64,
        mv_psi: f64,
    },
    Student {
        df: f64,
        mu: DVector<f64>,
        s_inv: DMatrix<f64>,
        s_inv2: DMatrix<f64>,
        norm: f64,
        psi_diff: f64,
    },
    Poisson {
        rate: f64,
    },
}

impl FactorQ {
    fn new(factor: &Factor, blocks: &[ParamBlock]) -> Result<Self> {
        let name = factor.name.as_str();
        let not_pd = || Error::domain("log_q", format!("factor `{name}` has a matrix that is not positive definite"));
        Ok(match factor.kind {
            FactorKind::GaussianDiag { dim, spherical } => FactorQ::Gaussian {
                mean: blocks[0].value.expect_vector(name, dim)?.clone(),
                sd: gaussian_sd(&blocks[1].value, dim, spherical, name)?,
                spherical,
            },
            FactorKind::Gamma => {
                let shape = blocks[0].value.expect_scalar(name)?;
                let rate = blocks[1].value.expect_scalar(name)?;
                FactorQ::Gamma {
                    shape,
                    rate,
                    norm: shape * rate.ln() - ln_gamma(shape),
                    psi: digamma(shape),
                }
            }
            FactorKind::Beta => {
                let a = blocks[0].value.expect_scalar(name)?;
                let b = blocks[1].value.expect_scalar(name)?;
                FactorQ::Beta {
                    a,
                    b,
                    norm: ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b),
                    psi_a: digamma(a),
                    psi_b: digamma(b),
                    psi_ab: digamma(a + b),
                }
            }
            FactorKind::Dirichlet { dim } => {
                let alpha = blocks[0].value.expect_vector(name, dim)?.clone();
                let total = alpha.sum();
                FactorQ::Dirichlet {
                    norm: ln_gamma(total) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>(),
                    psi: alpha.map(digamma),
                    psi_sum: digamma(total),
                    alpha,
                }
            }
            FactorKind::Wishart { dim } => {
                let df = blocks[0].value.expect_scalar(name)?;
                let c = blocks[1].value.expect_matrix(name, dim)?;
                let c_inv = inverse_spd(c).ok_or_else(not_pd)?;
                let ln_det_v = 2.0 * ln_det_spd(c).ok_or_else(not_pd)?;
                let p = dim as f64;
                FactorQ::Wishart {
                    df,
                    v_inv: &c_inv * &c_inv,
                    c: c.clone(),
                    c_inv,
                    ln_det_v,
                    norm: -0.5 * df * p * std::f64::consts::LN_2
                        - 0.5 * df * ln_det_v
                        - ln_mv_gamma_unchecked(0.5 * df, dim),
                    mv_psi: mv_digamma_unchecked(0.5 * df, dim),
                }
            }
            FactorKind::StudentMv { dim, .. } => {
                let df = blocks[0].value.expect_scalar(name)?;
                let mu = blocks[1].value.expect_vector(name, dim)?.clone();
                let s = blocks[2].value.expect_matrix(name, dim)?;
                let s_inv = inverse_spd(s).ok_or_else(not_pd)?;
                let ln_det_s = ln_det_spd(s).ok_or_else(not_pd)?;
                let p = dim as f64;
                FactorQ::Student {
                    norm: ln_gamma(0.5 * (df + p)) - ln_gamma(0.5 * df)
                        - 0.5 * p * (df * std::f64::consts::PI).ln()
                        - ln_det_s,
                    psi_diff: 0.5 * digamma(0.5 * (df + p)) - 0.5 * digamma(0.5 * df),
                    s_inv2: &s_inv * &s_inv,
                    s_inv,
                    df,
                    mu,
                }
            }
            FactorKind::Poisson { .. } => FactorQ::Poisson {
                rate: blocks[0].value.expect_scalar(name)?,
            },
        })
    }

    fn log_q(&self, t: &ThetaValue) -> f64 {
        match (self, t) {
            (FactorQ::Gaussian { mean, sd, .. }, ThetaValue::Vector(x)) => x
                .iter()
                .zip(mean.iter())
                .zip(sd.iter())
                .map(|((x, m), s)| {
                    let z = (x - m) / s;
                    -0.5 * LN_2PI - s.ln() - 0.5 * z * z
                })
                .sum(),
            (FactorQ::Gamma { shape, rate, norm, .. }, ThetaValue::Real(x)) => {
                if *x <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    norm + (shape - 1.0) * x.ln() - rate * x
                }
            }
            (FactorQ::Beta { a, b, norm, .. }, ThetaValue::Real(x)) => {
                if *x <= 0.0 || *x >= 1.0 {
                    f64::NEG_INFINITY
                } else {
                    norm + (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p()
                }
            }
            (FactorQ::Dirichlet { alpha, norm, .. }, ThetaValue::Vector(x)) => {
                if x.iter().any(|&v| v <= 0.0) || (x.sum() - 1.0).abs() > 1e-9 {
                    f64::NEG_INFINITY
                } else {
                    norm + x.iter().zip(alpha.iter()).map(|(t, a)| (a - 1.0) * t.ln()).sum::<f64>()
                }
            }
            (
                FactorQ::Wishart {
                    df, v_inv, norm, ..
                },
                ThetaValue::Matrix(s),
            ) => {
                let Some(ln_det_s) = ln_det_spd(s) else {
                    return f64::NEG_INFINITY;
                };
                let p = s.nrows() as f64;
                0.5 * (df - p - 1.0) * ln_det_s - 0.5 * v_inv.component_mul(s).sum() + norm
            }
            (
                FactorQ::Student {
                    df, mu, s_inv, norm, ..
                },
                ThetaValue::Vector(x),
            ) => {
                let p = mu.len() as f64;
                let delta = (s_inv * (x - mu)).norm_squared();
                norm - 0.5 * (df + p) * (delta / df).ln_1p()
            }
            (FactorQ::Poisson { rate }, ThetaValue::Count(k)) => {
                let kf = *k as f64;
                kf * rate.ln() - rate - ln_gamma(kf + 1.0)
            }
            _ => f64::NAN,
        }
    }

    /// `∇_θ log q` for continuous factors that support pathwise gradients.
    fn grad_theta(&self, t: &ThetaValue) -> Option<ThetaValue> {
        Some(match (self, t) {
            (FactorQ::Gaussian { mean, sd, .. }, ThetaValue::Vector(x)) => {
                ThetaValue::Vector((mean - x).component_div(&sd.component_mul(sd)))
            }
            (FactorQ::Gamma { shape, rate, .. }, ThetaValue::Real(x)) => ThetaValue::Real((shape - 1.0) / x - rate),
            (FactorQ::Beta { a, b, .. }, ThetaValue::Real(x)) => {
                ThetaValue::Real((a - 1.0) / x - (b - 1.0) / (1.0 - x))
            }
            (FactorQ::Wishart { df, v_inv, .. }, ThetaValue::Matrix(s)) => {
                let p = s.nrows() as f64;
                let s_inv = inverse_spd(s)?;
                ThetaValue::Matrix(s_inv * (0.5 * (df - p - 1.0)) - v_inv * 0.5)
            }
            (
                FactorQ::Student {
                    df, mu, s_inv2, ..
                },
                ThetaValue::Vector(x),
            ) => {
                let p = mu.len() as f64;
                let b = s_inv2 * (x - mu);
                let delta = (x - mu).dot(&b);
                ThetaValue::Vector(b * (-(df + p) / (df + delta)))
            }
            _ => return None,
        })
    }

    /// `∇_λ log q` for each block of the factor, in role order.
    fn score(&self, t: &ThetaValue) -> Vec<ParamValue> {
        match (self, t) {
            (
                FactorQ::Gaussian {
                    mean,
                    sd,
                    spherical,
                },
                ThetaValue::Vector(x),
            ) => {
                let r = x - mean;
                let loc = r.component_div(&sd.component_mul(sd));
                let scale = DVector::from_iterator(
                    r.len(),
                    r.iter().zip(sd.iter()).map(|(r, s)| -1.0 / s + r * r / (s * s * s)),
                );
                let scale = if *spherical { ParamValue::Scalar(scale.sum()) } else { ParamValue::Vector(scale) };
                vec![ParamValue::Vector(loc), scale]
            }
            (
                FactorQ::Gamma {
                    shape, rate, psi, ..
                },
                ThetaValue::Real(x),
            ) => vec![
                ParamValue::Scalar(rate.ln() - psi + x.ln()),
                ParamValue::Scalar(shape / rate - x),
            ],
            (
                FactorQ::Beta {
                    psi_a, psi_b, psi_ab, ..
                },
                ThetaValue::Real(x),
            ) => vec![
                ParamValue::Scalar(x.ln() - psi_a + psi_ab),
                ParamValue::Scalar((-x).ln_1p() - psi_b + psi_ab),
            ],
            (FactorQ::Dirichlet { psi, psi_sum, .. }, ThetaValue::Vector(x)) => {
                vec![ParamValue::Vector(DVector::from_iterator(
                    x.len(),
                    x.iter().zip(psi.iter()).map(|(t, p)| t.ln() - p + psi_sum),
                ))]
            }
            (
                FactorQ::Wishart {
                    df,
                    c_inv,
                    ln_det_v,
                    mv_psi,
                    ..
                },
                ThetaValue::Matrix(s),
            ) => {
                let p = s.nrows() as f64;
                let ln_det_s = ln_det_spd(s).unwrap_or(f64::NAN);
                let d_score = 0.5 * ln_det_s - 0.5 * p * std::f64::consts::LN_2 - 0.5 * ln_det_v - 0.5 * mv_psi;
                let c_inv2 = c_inv * c_inv;
                let a = c_inv * s * &c_inv2;
                let g = (&a + a.transpose()) * 0.5 - c_inv * *df;
                vec![ParamValue::Scalar(d_score), ParamValue::Matrix(g)]
            }
            (
                FactorQ::Student {
                    df,
                    mu,
                    s_inv,
                    s_inv2,
                    psi_diff,
                    ..
                },
                ThetaValue::Vector(x),
            ) => {
                let p = mu.len() as f64;
                let r = x - mu;
                let a = s_inv * &r;
                let b = s_inv2 * &r;
                let delta = a.norm_squared();
                let u = delta / df;
                let d_score = psi_diff - 0.5 * p / df - 0.5 * u.ln_1p() + 0.5 * (df + p) * (delta / (df * df)) / (1.0 + u);
                let k = (df + p) / (df + delta);
                let s_score = -s_inv + (&a * b.transpose() + &b * a.transpose()) * (0.5 * k);
                vec![
                    ParamValue::Scalar(d_score),
                    ParamValue::Vector(&b * k),
                    ParamValue::Matrix(s_score),
                ]
            }
            (FactorQ::Poisson { rate }, ThetaValue::Count(k)) => {
                vec![ParamValue::Scalar(*k as f64 / rate - 1.0)]
            }
            _ => Vec::new(),
        }
    }

    /// Chain-rule contribution of `g = ∇_θ (log p - log q)` to a reparam block.
    fn reparam_contribution(&self, role: usize, base: &FactorBase, g: &ThetaValue) -> Option<ParamValue> {
        match (self, role, base, g) {
            (FactorQ::Gaussian { .. }, 0, _, ThetaValue::Vector(g)) => Some(ParamValue::Vector(g.clone())),
            (FactorQ::Gaussian { spherical, .. }, 1, FactorBase::Gaussian { z }, ThetaValue::Vector(g)) => {
                let gz = g.component_mul(z);
                Some(if *spherical { ParamValue::Scalar(gz.sum()) } else { ParamValue::Vector(gz) })
            }
            (FactorQ::Gamma { rate, .. }, 1, FactorBase::Gamma { g: base }, ThetaValue::Real(g)) => {
                Some(ParamValue::Scalar(-base / (rate * rate) * g))
            }
            (FactorQ::Wishart { c, .. }, 1, FactorBase::Wishart { w }, ThetaValue::Matrix(gs)) => {
                let gsym = (gs + gs.transpose()) * 0.5;
                let left = &gsym * c * w;
                Some(ParamValue::Matrix(&left + left.transpose()))
            }
            (FactorQ::Student { .. }, 1, _, ThetaValue::Vector(g)) => Some(ParamValue::Vector(g.clone())),
            (FactorQ::Student { df, .. }, 2, FactorBase::Student { z, c }, ThetaValue::Vector(g)) => {
                let u = z / (c / df).sqrt();
                let m = g * u.transpose();
                Some(ParamValue::Matrix((&m + m.transpose()) * 0.5))
            }
            _ => None,
        }
    }
}

/// Variational density at fixed parameters, with per-factor normalizers and
/// inverses computed once.
#[derive(Clone, Debug)]
pub struct QDensity {
    factors: Vec<FactorQ>,
    offsets: Vec<usize>,
    n_blocks: usize,
}

impl QDensity {
    pub fn new(family: &FamilySpec, params: &VariationalParams) -> Result<Self> {
        family.validate(params)?;
        let factors = family
            .factors
            .iter()
            .enumerate()
            .map(|(fi, f)| {
                let off = family.offsets[fi];
                FactorQ::new(f, &params.blocks[off..off + f.kind.roles().len()])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QDensity {
            factors,
            offsets: family.offsets.clone(),
            n_blocks: family.n_blocks(),
        })
    }

    /// Joint log-density; `-inf` outside the support.
    pub fn log_q(&self, theta: &Theta) -> f64 {
        self.factors.iter().zip(&theta.0).map(|(q, t)| q.log_q(t)).sum()
    }

    /// Log-density of a single factor.
    pub fn log_q_factor(&self, f: usize, value: &ThetaValue) -> f64 {
        self.factors[f].log_q(value)
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    /// Factor that owns block `b`.
    pub fn factor_of(&self, b: usize) -> usize {
        self.offsets.partition_point(|&o| o <= b) - 1
    }

    /// Score of every block of factor `f`, in block order.
    pub fn factor_score(&self, f: usize, value: &ThetaValue) -> Vec<ParamValue> {
        self.factors[f].score(value)
    }

    /// Score `∇_λ log q(θ; λ)` for all blocks.
    pub fn score(&self, theta: &Theta) -> Vec<ParamValue> {
        self.factors.iter().zip(&theta.0).flat_map(|(q, t)| q.score(t)).collect()
    }

    /// `∇_θ log q`, or `None` if a factor is discrete or has no pathwise form.
    pub fn grad_theta(&self, theta: &Theta) -> Option<Theta> {
        self.factors
            .iter()
            .zip(&theta.0)
            .map(|(q, t)| q.grad_theta(t))
            .collect::<Option<Vec<_>>>()
            .map(Theta)
    }

    /// Component of `∇_θ log q` for one factor.
    pub fn grad_theta_factor(&self, f: usize, value: &ThetaValue) -> Option<ThetaValue> {
        self.factors[f].grad_theta(value)
    }

    /// Pathwise contribution of one draw to block `b`, given the gradient of
    /// the log-ratio with respect to that block's factor component.
    pub fn reparam_contribution(&self, b: usize, base: &[FactorBase], g: &ThetaValue) -> Result<ParamValue> {
        if b >= self.n_blocks {
            return Err(Error::Contract(format!("block index {b} out of range")));
        }
        let f = self.factor_of(b);
        self.factors[f]
            .reparam_contribution(b - self.offsets[f], &base[f], g)
            .ok_or_else(|| Error::Contract(format!("block {b} has no pathwise gradient for this draw")))
    }
}

/// Normalized log-density of `theta` under the family at `params`.
pub fn log_q(family: &FamilySpec, params: &VariationalParams, theta: &Theta) -> Result<f64> {
    family.check_theta(theta)?;
    Ok(QDensity::new(family, params)?.log_q(theta))
}

/// Score `∇_λ log q(θ; λ)` for every block.
pub fn score(family: &FamilySpec, params: &VariationalParams, theta: &Theta) -> Result<Vec<ParamValue>> {
    family.check_theta(theta)?;
    Ok(QDensity::new(family, params)?.score(theta))
}

/// Average pathwise gradient for every reparam block.
///
/// `grad_logratio[j]` is `∇_θ (log p - log q)` at `draws[j].center`. Entries
/// for finite-difference blocks are `None`.
pub fn assemble_reparam_gradient(
    family: &FamilySpec,
    params: &VariationalParams,
    draws: &[JointDraw],
    grad_logratio: &[Theta],
) -> Result<Vec<Option<ParamValue>>> {
    if draws.len() != grad_logratio.len() || draws.is_empty() {
        return Err(Error::Contract("need one log-ratio gradient per draw".into()));
    }
    let q = QDensity::new(family, params)?;
    let mut out: Vec<Option<ParamValue>> = params
        .blocks()
        .iter()
        .map(|b| (b.kind == BlockKind::Reparam).then(|| b.value.zeros_like()))
        .collect();
    for (draw, g) in draws.iter().zip(grad_logratio) {
        family.check_theta(g)?;
        if draw.base.len() != family.factors.len() {
            return Err(Error::Contract("draw is missing its base randomness".into()));
        }
        for (b, acc) in out.iter_mut().enumerate() {
            if let Some(acc) = acc {
                let f = q.factor_of(b);
                let c = q.reparam_contribution(b, &draw.base, &g.0[f])?;
                acc.axpy(1.0, &c);
            }
        }
    }
    let inv = 1.0 / draws.len() as f64;
    for v in out.iter_mut().flatten() {
        v.scale(inv);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gamma_family() -> FamilySpec {
        FamilySpec::new(vec![Factor::new("tau", FactorKind::Gamma)]).unwrap()
    }

    #[test]
    fn layout_names() {
        let fam = FamilySpec::new(vec![
            Factor::new("w", FactorKind::GaussianDiag { dim: 2, spherical: false }),
            Factor::new("tau", FactorKind::Gamma),
        ])
        .unwrap();
        let names: Vec<_> = fam.layout().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["w.loc", "w.scale", "tau.shape", "tau.rate"]);
        assert!(FamilySpec::new(vec![
            Factor::new("a", FactorKind::Gamma),
            Factor::new("a", FactorKind::Gamma)
        ])
        .is_err());
    }

    #[test]
    fn builder_rejects_bad_blocks() {
        let fam = gamma_family();
        assert!(fam.builder().reparam("tau.shape", 1.0).reparam("tau.rate", 1.0).build().is_err());
        assert!(fam.builder().fd("tau.shape", 1.0, 0.1).build().is_err());
        assert!(fam.builder().fd("tau.shape", -1.0, 0.1).reparam("tau.rate", 1.0).build().is_err());
        assert!(fam.builder().fd("tau.shape", 1.0, 0.0).reparam("tau.rate", 1.0).build().is_err());
        assert!(fam
            .builder()
            .fd("tau.shape", 1.0, 0.1)
            .reparam("tau.rate", 1.0)
            .reparam("tau.extra", 1.0)
            .build()
            .is_err());
    }

    #[test]
    fn gamma_log_q_point() {
        let fam = gamma_family();
        let p = fam.builder().fd("tau.shape", 1.0, 0.1).reparam("tau.rate", 1.0).build().unwrap();
        let lq = log_q(&fam, &p, &Theta(vec![ThetaValue::Real(1.0)])).unwrap();
        assert!((lq + 1.0).abs() < 1e-14);
        let out = log_q(&fam, &p, &Theta(vec![ThetaValue::Real(-1.0)])).unwrap();
        assert_eq!(out, f64::NEG_INFINITY);
    }

    #[test]
    fn gamma_center_from_shared_base() {
        let fam = gamma_family();
        let p = fam.builder().fd("tau.shape", 3.0, 0.5).reparam("tau.rate", 2.0).build().unwrap();
        let mut s = RandomStream::new(3);
        for d in sample_joint(&fam, &p, &mut s, 100).unwrap() {
            let FactorBase::Gamma { g } = d.base[0] else { panic!() };
            assert_eq!(d.center.0[0], ThetaValue::Real(g / 2.0));
            assert_eq!(d.perturbed.len(), 1);
            let pert = &d.perturbed[0];
            let (lo, c, hi) = (pert.minus.0[0].real().unwrap(), g / 2.0, pert.plus.0[0].real().unwrap());
            assert!(lo <= c && c <= hi);
            assert_eq!(pert.divisor, 1.0);
        }
    }

    #[test]
    fn boundary_error_names_block() {
        let fam = gamma_family();
        let p = fam.builder().fd("tau.shape", 0.4, 0.5).reparam("tau.rate", 2.0).build().unwrap();
        let mut s = RandomStream::new(4);
        match sample_joint(&fam, &p, &mut s, 1) {
            Err(Error::Boundary { param, .. }) => assert_eq!(param, "tau.shape"),
            other => panic!("{other:?}"),
        }
        // centre-only sampling ignores the step
        assert!(sample_centers(&fam, &p, &mut s, 1).is_ok());
        let p = fam.builder().fd_one_sided("tau.shape", 0.4, 0.5).reparam("tau.rate", 2.0).build().unwrap();
        let d = sample_joint(&fam, &p, &mut s, 1).unwrap();
        assert_eq!(d[0].perturbed[0].minus, d[0].center);
        assert_eq!(d[0].perturbed[0].divisor, 0.5);
    }

    #[test]
    fn pure_gaussian_has_no_perturbations() {
        let fam = FamilySpec::new(vec![Factor::new("x", FactorKind::GaussianDiag { dim: 3, spherical: false })]).unwrap();
        let p = fam
            .builder()
            .reparam("x.loc", vec![0.0, 1.0, 2.0])
            .reparam("x.scale", vec![1.0, 1.0, 1.0])
            .build()
            .unwrap();
        let mut s = RandomStream::new(5);
        let d = sample_joint(&fam, &p, &mut s, 4).unwrap();
        assert!(d.iter().all(|d| d.perturbed.is_empty()));
        assert!(matches!(d[0].base[0], FactorBase::Gaussian { .. }));
    }

    #[test]
    fn product_log_q_is_sum() {
        let fam = FamilySpec::new(vec![
            Factor::new("tau", FactorKind::Gamma),
            Factor::new("x", FactorKind::GaussianDiag { dim: 2, spherical: true }),
        ])
        .unwrap();
        let p = fam
            .builder()
            .fd("tau.shape", 2.5, 0.5)
            .reparam("tau.rate", 1.5)
            .reparam("x.loc", vec![0.3, -0.2])
            .reparam("x.scale", 0.7)
            .build()
            .unwrap();
        let mut s = RandomStream::new(6);
        for d in sample_joint(&fam, &p, &mut s, 50).unwrap() {
            let t = d.center.0[0].real().unwrap();
            let x = d.center.0[1].vector().unwrap();
            let expected = crate::distributions::log_pdf_gamma(t, 2.5, 1.5).unwrap()
                + crate::distributions::log_pdf_normal_diag(
                    x,
                    &DVector::from_vec(vec![0.3, -0.2]),
                    &DVector::from_vec(vec![0.7, 0.7]),
                )
                .unwrap();
            let lq = log_q(&fam, &p, &d.center).unwrap();
            assert!((lq - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn wishart_one_dim_matches_gamma() {
        let fam = FamilySpec::new(vec![Factor::new("s", FactorKind::Wishart { dim: 1 })]).unwrap();
        let v: f64 = 0.8;
        let p = fam
            .builder()
            .fd("s.df", 4.0, 1.0)
            .reparam("s.scale_root", DMatrix::from_element(1, 1, v.sqrt()))
            .build()
            .unwrap();
        for x in [0.1, 1.0, 3.5] {
            let lq = log_q(&fam, &p, &Theta(vec![ThetaValue::Matrix(DMatrix::from_element(1, 1, x))])).unwrap();
            let lg = crate::distributions::log_pdf_gamma(x, 2.0, 1.0 / (2.0 * v)).unwrap();
            assert!((lq - lg).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_rate_contribution() {
        let fam = gamma_family();
        let p = fam.builder().fd("tau.shape", 3.0, 0.5).reparam("tau.rate", 2.0).build().unwrap();
        let q = QDensity::new(&fam, &p).unwrap();
        let c = q
            .reparam_contribution(1, &[FactorBase::Gamma { g: 1.2 }], &ThetaValue::Real(0.5))
            .unwrap();
        assert!((c.scalar().unwrap() - (-(1.2 / 4.0) * 0.5)).abs() < 1e-15);
        assert!(q.reparam_contribution(0, &[FactorBase::Gamma { g: 1.2 }], &ThetaValue::Real(0.5)).is_err());
    }

    #[test]
    fn student_scale_contribution_symmetric() {
        let fam = FamilySpec::new(vec![Factor::new(
            "t",
            FactorKind::StudentMv {
                dim: 3,
                normalization: StudentNormalization::ShiftedDf,
            },
        )])
        .unwrap();
        let p = fam
            .builder()
            .fd("t.df", 5.0, 1.0)
            .reparam("t.loc", vec![0.0; 3])
            .reparam("t.scale", DMatrix::identity(3, 3))
            .build()
            .unwrap();
        let q = QDensity::new(&fam, &p).unwrap();
        let base = [FactorBase::Student {
            z: DVector::from_vec(vec![0.3, -1.0, 2.0]),
            c: 4.0,
        }];
        let g = ThetaValue::Vector(DVector::from_vec(vec![1.0, 0.5, -0.25]));
        let m = q.reparam_contribution(2, &base, &g).unwrap();
        let m = m.matrix().unwrap();
        assert!((m - m.transpose()).amax() < 1e-12);
    }
}
