//! Run configuration in TOML.
//!
//! ```toml
//! experiment = "linreg-fit"   # gamma-normal-mse | linreg-fit | student-wishart-fit | variance-probe
//! seed = 7
//! output_dir = "out"
//!
//! [data]
//! path = "housing.csv"        # omit for synthetic data
//! test_fraction = 0.0
//!
//! [data.synthetic]
//! n = 506
//! dim = 13
//!
//! [fit]
//! estimator = "vind"          # vind | vind_uncoupled | bbvi | bbvi_rb
//! iterations = 10000
//!
//! [fit.blocks."tau.shape"]
//! epsilon = 1.0
//! learning_rate = 1.0
//! ```
//!
//! Omitted values get per-experiment defaults; see [`parse_config`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::BlockMethod;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    GammaNormalMse,
    LinregFit,
    StudentWishartFit,
    VarianceProbe,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::GammaNormalMse => "gamma-normal-mse",
            ExperimentKind::LinregFit => "linreg-fit",
            ExperimentKind::StudentWishartFit => "student-wishart-fit",
            ExperimentKind::VarianceProbe => "variance-probe",
        }
    }

    fn is_fit(&self) -> bool {
        !matches!(self, ExperimentKind::GammaNormalMse)
    }

    /// Block names of the experiment's family, with whether each is a
    /// finite-difference block.
    pub fn blocks(&self) -> &'static [(&'static str, bool)] {
        match self {
            ExperimentKind::GammaNormalMse => &[("tau.shape", true), ("tau.rate", false)],
            ExperimentKind::LinregFit => &[("w.loc", false), ("w.scale", false), ("tau.shape", true), ("tau.rate", false)],
            ExperimentKind::StudentWishartFit | ExperimentKind::VarianceProbe => &[
                ("mu.loc", false),
                ("mu.scale", false),
                ("lambda.df", true),
                ("lambda.scale_root", false),
                ("nu.shape", true),
                ("nu.rate", false),
            ],
        }
    }
}

/// Gradient method for the finite-difference blocks of a fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitEstimator {
    #[default]
    Vind,
    VindUncoupled,
    Bbvi,
    BbviRb,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Total rows, training and held-out together.
    pub n: Option<usize>,
    pub dim: Option<usize>,
    /// Noise precision (gamma-normal, linreg).
    pub tau: Option<f64>,
    /// Student degrees of freedom.
    pub nu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// CSV input; synthetic data when absent.
    pub path: Option<PathBuf>,
    /// Fraction of rows held out at the end of the table.
    pub test_fraction: Option<f64>,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSettings {
    /// Overrides the method implied by `fit.estimator`.
    pub method: Option<BlockMethod>,
    pub epsilon: Option<f64>,
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub estimator: Option<FitEstimator>,
    pub iterations: Option<usize>,
    pub n_samples: Option<usize>,
    pub elbo_samples: Option<usize>,
    /// Held-out log loss every this many iterations.
    pub heldout_every: Option<usize>,
    pub heldout_draws: Option<usize>,
    #[serde(default)]
    pub blocks: BTreeMap<String, BlockSettings>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MseSection {
    pub epsilons: Option<Vec<f64>>,
    pub iterations: Option<usize>,
    pub n_per_estimate: Option<usize>,
    pub n_reps: Option<usize>,
    pub alpha_init: Option<f64>,
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub every: Option<usize>,
    pub n_probe: Option<usize>,
    pub estimators: Option<Vec<FitEstimator>>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    pub fit: Option<FitSection>,
    pub mse: Option<MseSection>,
    pub probe: Option<ProbeSection>,
}

impl RunConfig {
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn fit(&self) -> &FitSection {
        self.fit.as_ref().expect("filled by parse_config")
    }

    pub fn mse(&self) -> &MseSection {
        self.mse.as_ref().expect("filled by parse_config")
    }

    pub fn probe(&self) -> &ProbeSection {
        self.probe.as_ref().expect("filled by parse_config")
    }

    /// Settings of a block after defaults were filled.
    pub fn block(&self, name: &str) -> &BlockSettings {
        &self.fit().blocks[name]
    }
}

fn value_error(key: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::ConfigValue {
        key: key.into(),
        msg: msg.into(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parse, fill defaults and validate.
///
/// Defaults by experiment:
///
/// | key | gamma-normal-mse | linreg-fit | student-wishart-fit, variance-probe |
/// |---|---|---|---|
/// | `data.synthetic.n` | 100 | 506 | 160 |
/// | `data.synthetic.dim` | 1 | 13 | 5 |
/// | `data.synthetic.tau` / `nu` | 1 | 1 | ν = 5 |
/// | `data.test_fraction` | 0 | 0 | 0.25 |
/// | `fit.iterations` | | 10000 | 2000 |
/// | `fit.n_samples` | | 3 | 3 |
/// | learning rates | | loc, scale 0.01; shape, rate 1 | 0.01 for df and shape, 0.001 otherwise |
/// | ε | | shape 1 | df 2d, shape 1 |
///
/// With a data file, an unset df step is resolved to `2d` once the file is read.
///
/// The MSE sweep defaults to ε ∈ {0.1, 1, 10, 100}, 200 iterations, 2 draws
/// per estimate, 1000 reps, α starting at 20 and ascent rate 0.5. The probe
/// defaults to every 100 iterations, 1000 single-draw estimates, estimators
/// `vind`, `vind_uncoupled` and `bbvi_rb`. Fit experiments also default to
/// `estimator = "vind"`, 100 ELBO draws, held-out loss every 100 iterations
/// from 1000 posterior draws. The seed defaults to 0 and the output
/// directory to `out`.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_in(text, None)
}

/// Read and parse a config file. A relative `data.path` is taken relative to
/// the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| value_error("config", format!("cannot read `{}`: {e}", path.display())))?;
    parse_config_in(&text, path.parent())
}

fn parse_config_in(text: &str, base: Option<&Path>) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        msg: e.message().to_string(),
    })?;
    if let (Some(base), Some(p)) = (base, cfg.data.path.as_mut()) {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    fill_defaults(&mut cfg)?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Serialize a config back to TOML.
pub fn emit_config(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config is always serializable")
}

fn fill_defaults(cfg: &mut RunConfig) -> Result<()> {
    use ExperimentKind::*;
    let kind = cfg.experiment;
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("out"));
    }
    let syn = &mut cfg.data.synthetic;
    let (n, dim, test) = match kind {
        GammaNormalMse => (100, 1, 0.0),
        LinregFit => (506, 13, 0.0),
        StudentWishartFit | VarianceProbe => (160, 5, 0.25),
    };
    syn.n.get_or_insert(n);
    syn.dim.get_or_insert(dim);
    match kind {
        GammaNormalMse | LinregFit => {
            syn.tau.get_or_insert(1.0);
            if syn.nu.is_some() {
                return Err(value_error("data.synthetic.nu", "not used by this experiment"));
            }
        }
        StudentWishartFit | VarianceProbe => {
            syn.nu.get_or_insert(5.0);
            if syn.tau.is_some() {
                return Err(value_error("data.synthetic.tau", "not used by this experiment"));
            }
        }
    }
    cfg.data.test_fraction.get_or_insert(test);
    let dim = cfg.data.synthetic.dim.unwrap_or(dim);

    if kind == GammaNormalMse {
        if cfg.fit.is_some() {
            return Err(value_error("fit", "section not used by gamma-normal-mse"));
        }
        let m = cfg.mse.get_or_insert_with(MseSection::default);
        m.epsilons.get_or_insert_with(|| vec![0.1, 1.0, 10.0, 100.0]);
        m.iterations.get_or_insert(200);
        m.n_per_estimate.get_or_insert(2);
        m.n_reps.get_or_insert(1000);
        m.alpha_init.get_or_insert(20.0);
        m.learning_rate.get_or_insert(0.5);
    } else if cfg.mse.is_some() {
        return Err(value_error("mse", format!("section not used by {}", kind.as_str())));
    }

    if kind == VarianceProbe {
        let p = cfg.probe.get_or_insert_with(ProbeSection::default);
        p.every.get_or_insert(100);
        p.n_probe.get_or_insert(1000);
        p.estimators
            .get_or_insert_with(|| vec![FitEstimator::Vind, FitEstimator::VindUncoupled, FitEstimator::BbviRb]);
    } else if cfg.probe.is_some() {
        return Err(value_error("probe", format!("section not used by {}", kind.as_str())));
    }

    if kind.is_fit() {
        let f = cfg.fit.get_or_insert_with(FitSection::default);
        f.estimator.get_or_insert(FitEstimator::Vind);
        f.iterations.get_or_insert(if kind == LinregFit { 10_000 } else { 2000 });
        f.n_samples.get_or_insert(3);
        f.elbo_samples.get_or_insert(100);
        f.heldout_every.get_or_insert(100);
        f.heldout_draws.get_or_insert(1000);
        if let Some(name) = f.blocks.keys().find(|k| !kind.blocks().iter().any(|(b, _)| b == k)) {
            return Err(value_error(format!("fit.blocks.{name}"), "no such block in this experiment"));
        }
        for &(name, fd) in kind.blocks() {
            let b = f.blocks.entry(name.to_string()).or_default();
            let (eps, lr) = match (kind, name) {
                (LinregFit, "tau.shape") => (Some(1.0), 1.0),
                (LinregFit, "tau.rate") => (None, 1.0),
                (LinregFit, _) => (None, 0.01),
                // with a data file the dimension is known only at run time
                (_, "lambda.df") => (cfg.data.path.is_none().then_some(2.0 * dim as f64), 0.01),
                (_, "nu.shape") => (Some(1.0), 0.01),
                _ => (None, 0.001),
            };
            if fd {
                if b.epsilon.is_none() {
                    b.epsilon = eps;
                }
            } else if b.epsilon.is_some() {
                return Err(value_error(
                    format!("fit.blocks.{name}.epsilon"),
                    "only finite-difference blocks take a step",
                ));
            }
            b.learning_rate.get_or_insert(lr);
        }
    }
    Ok(())
}

fn check_positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(value_error(key, format!("must be positive and finite, got {v}")))
    }
}

fn check_at_least(key: &str, v: usize, lo: usize) -> Result<()> {
    if v >= lo {
        Ok(())
    } else {
        Err(value_error(key, format!("must be at least {lo}, got {v}")))
    }
}

fn validate(cfg: &RunConfig) -> Result<()> {
    let kind = cfg.experiment;
    if let Some(path) = &cfg.data.path {
        if !path.is_file() {
            return Err(value_error("data.path", format!("file `{}` does not exist", path.display())));
        }
    }
    let syn = &cfg.data.synthetic;
    let n = syn.n.expect("filled");
    let dim = syn.dim.expect("filled");
    check_at_least("data.synthetic.n", n, 1)?;
    check_at_least("data.synthetic.dim", dim, 1)?;
    if kind == ExperimentKind::GammaNormalMse && dim != 1 {
        return Err(value_error("data.synthetic.dim", "gamma-normal data is one-dimensional"));
    }
    if let Some(t) = syn.tau {
        check_positive("data.synthetic.tau", t)?;
    }
    if let Some(v) = syn.nu {
        check_positive("data.synthetic.nu", v)?;
    }
    let tf = cfg.data.test_fraction.expect("filled");
    if !(0.0..1.0).contains(&tf) {
        return Err(value_error("data.test_fraction", format!("must lie in [0, 1), got {tf}")));
    }
    if kind == ExperimentKind::GammaNormalMse && tf != 0.0 {
        return Err(value_error("data.test_fraction", "gamma-normal-mse has no held-out set"));
    }
    if cfg.data.path.is_none() {
        let n_train = n - (tf * n as f64).round() as usize;
        let need = match kind {
            ExperimentKind::GammaNormalMse => 1,
            ExperimentKind::LinregFit => dim,
            _ => dim + 1,
        };
        if n_train < need {
            return Err(value_error("data.synthetic.n", format!("too few training rows ({n_train}) for dim {dim}")));
        }
    }

    if let Some(m) = &cfg.mse {
        let eps = m.epsilons.as_ref().expect("filled");
        if eps.is_empty() {
            return Err(value_error("mse.epsilons", "need at least one step"));
        }
        for (i, &e) in eps.iter().enumerate() {
            check_positive(&format!("mse.epsilons[{i}]"), e)?;
        }
        check_at_least("mse.n_reps", m.n_reps.expect("filled"), 2)?;
        check_at_least("mse.n_per_estimate", m.n_per_estimate.expect("filled"), 1)?;
        check_positive("mse.alpha_init", m.alpha_init.expect("filled"))?;
        check_positive("mse.learning_rate", m.learning_rate.expect("filled"))?;
    }
    if let Some(p) = &cfg.probe {
        check_at_least("probe.every", p.every.expect("filled"), 1)?;
        check_at_least("probe.n_probe", p.n_probe.expect("filled"), 2)?;
        if p.estimators.as_ref().expect("filled").is_empty() {
            return Err(value_error("probe.estimators", "need at least one estimator"));
        }
    }
    if let Some(f) = &cfg.fit {
        check_at_least("fit.n_samples", f.n_samples.expect("filled"), 1)?;
        check_at_least("fit.elbo_samples", f.elbo_samples.expect("filled"), 1)?;
        check_at_least("fit.heldout_every", f.heldout_every.expect("filled"), 1)?;
        check_at_least("fit.heldout_draws", f.heldout_draws.expect("filled"), 1)?;
        for &(name, fd) in kind.blocks() {
            let b = &f.blocks[name];
            if let Some(e) = b.epsilon {
                check_positive(&format!("fit.blocks.{name}.epsilon"), e)?;
            }
            let lr = b.learning_rate.expect("filled");
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(value_error(
                    format!("fit.blocks.{name}.learning_rate"),
                    format!("must be non-negative and finite, got {lr}"),
                ));
            }
            if let Some(m) = b.method {
                let fd_method = matches!(m, BlockMethod::Vind | BlockMethod::VindUncoupled | BlockMethod::NaiveFd);
                if fd_method && !fd {
                    return Err(value_error(
                        format!("fit.blocks.{name}.method"),
                        "finite-difference methods need a finite-difference block",
                    ));
                }
                if m == BlockMethod::Reparam && fd {
                    return Err(value_error(
                        format!("fit.blocks.{name}.method"),
                        "this block has no pathwise gradient",
                    ));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("seed = 3").unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::GammaNormalMse);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.data.synthetic.n, Some(100));
        assert_eq!(cfg.mse().n_reps, Some(1000));
        assert_eq!(cfg.mse().epsilons.as_deref(), Some(&[0.1, 1.0, 10.0, 100.0][..]));
        assert!(cfg.fit.is_none());
    }

    #[test]
    fn negative_epsilon_names_key() {
        let text = "experiment = \"linreg-fit\"\n[fit.blocks.\"tau.shape\"]\nepsilon = -1.0\n";
        match parse_config(text) {
            Err(Error::ConfigValue { key, .. }) => assert_eq!(key, "fit.blocks.tau.shape.epsilon"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_config("[mse]\nepsilons = [1.0, -1.0]\n") {
            Err(Error::ConfigValue { key, .. }) => assert_eq!(key, "mse.epsilons[1]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_has_line() {
        match parse_config("seed = 1\n\n[mse]\nbogus = 2\n") {
            Err(Error::ConfigParse { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("bogus"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        for text in [
            "seed = 1",
            "experiment = \"linreg-fit\"\nseed = 9\n[fit]\nestimator = \"bbvi\"\n",
            "experiment = \"variance-probe\"\n[probe]\nevery = 50\n",
        ] {
            let cfg = parse_config(text).unwrap();
            let again = parse_config(&emit_config(&cfg)).unwrap();
            assert_eq!(cfg, again);
        }
    }

    #[test]
    fn sections_must_match_experiment() {
        assert!(matches!(
            parse_config("experiment = \"linreg-fit\"\n[mse]\nn_reps = 5\n"),
            Err(Error::ConfigValue { .. })
        ));
        assert!(matches!(
            parse_config("experiment = \"linreg-fit\"\n[fit.blocks.\"lambda.df\"]\nepsilon = 1.0\n"),
            Err(Error::ConfigValue { .. })
        ));
        assert!(matches!(
            parse_config("experiment = \"linreg-fit\"\n[fit.blocks.\"w.loc\"]\nmethod = \"vind\"\n"),
            Err(Error::ConfigValue { .. })
        ));
    }

    #[test]
    fn missing_path_is_rejected() {
        match parse_config("[data]\npath = \"/definitely/not/here.csv\"\n") {
            Err(Error::ConfigValue { key, .. }) => assert_eq!(key, "data.path"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
