//! Running a configured experiment and writing its result files.
//!
//! Every run writes `run.json`. Fit experiments add `trace.csv` and, with a
//! held-out set, `heldout.csv`; the MSE sweep and the variance probe add
//! `stats.csv`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use super::config::{ExperimentKind, FitEstimator, RunConfig};
use super::data::{load_numeric_csv, load_regression_csv, load_returns_csv, write_matrix_csv, Cell, Table};
use super::experiments::{
    decorrelate_features, fit_plan, linreg_family, linreg_heldout_log_loss, linreg_init, student_family,
    student_heldout_log_loss, student_init, FitVariant,
};
use crate::diagnostics::{kl_gamma, mse_sweep, smooth, variance_probe, ProbeEstimator, SweepConfig};
use crate::distributions::special::ln_gamma;
use crate::distributions::RandomStream;
use crate::error::{Error, Result};
use crate::estimators::EstimatorPlan;
use crate::families::{FamilySpec, ParamValue, VariationalParams};
use crate::models::{
    synth_gamma_normal, synth_linreg, synth_student, GammaNormal, GammaNormalData, LinReg, LinRegData,
    StudentWishart, StudentWishartData, TargetModel,
};
use crate::optimize::{fit, FitConfig, FitTrace};

pub const TRACE_FILE: &str = "trace.csv";
pub const STATS_FILE: &str = "stats.csv";
pub const HELDOUT_FILE: &str = "heldout.csv";
pub const RUN_FILE: &str = "run.json";

const STATS_HEADER: [&str; 7] = ["iter", "estimator", "epsilon", "block", "bias", "variance", "mse"];

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

/// Independent streams for the pieces of a run, all derived from the seed.
struct Streams {
    data: RandomStream,
    fit_seed: u64,
    heldout: RandomStream,
    extra: RandomStream,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut root = RandomStream::new(seed);
        Streams {
            data: root.fork(),
            fit_seed: root.fork().seed(),
            heldout: root.fork(),
            extra: root.fork(),
        }
    }
}

fn variant(e: FitEstimator) -> FitVariant {
    match e {
        FitEstimator::Vind => FitVariant::Vind,
        FitEstimator::VindUncoupled => FitVariant::VindUncoupled,
        FitEstimator::Bbvi => FitVariant::Bbvi,
        FitEstimator::BbviRb => FitVariant::BbviRb,
    }
}

fn estimator_label(e: FitEstimator) -> &'static str {
    match e {
        FitEstimator::Vind => "vind",
        FitEstimator::VindUncoupled => "vind_uncoupled",
        FitEstimator::Bbvi => "bbvi",
        FitEstimator::BbviRb => "bbvi_rb",
    }
}

/// Column names of every scalar inside the parameter blocks: `name`,
/// `name[i]` for vectors, `name[i,j]` (upper triangle) for matrices.
pub fn param_columns(params: &VariationalParams) -> Vec<String> {
    let mut cols = Vec::new();
    for b in params.blocks() {
        match &b.value {
            ParamValue::Scalar(_) => cols.push(b.name.clone()),
            ParamValue::Vector(v) => cols.extend((0..v.len()).map(|i| format!("{}[{i}]", b.name))),
            ParamValue::Matrix(m) => {
                for i in 0..m.nrows() {
                    for j in i..m.ncols() {
                        cols.push(format!("{}[{i},{j}]", b.name));
                    }
                }
            }
        }
    }
    cols
}

fn param_cells(params: &VariationalParams) -> Vec<Cell> {
    let mut cells = Vec::new();
    for b in params.blocks() {
        match &b.value {
            ParamValue::Scalar(v) => cells.push(Cell::Num(*v)),
            ParamValue::Vector(v) => cells.extend(v.iter().map(|&x| Cell::Num(x))),
            ParamValue::Matrix(m) => {
                for i in 0..m.nrows() {
                    for j in i..m.ncols() {
                        cells.push(Cell::Num(m[(i, j)]));
                    }
                }
            }
        }
    }
    cells
}

/// `trace.csv` contents for a fit.
pub fn trace_table(trace: &FitTrace) -> Result<Table> {
    let first = &trace.records[0].params;
    let mut header = vec!["iter".to_string(), "neg_elbo".to_string()];
    header.extend(param_columns(first));
    let mut t = Table::new(header);
    for r in &trace.records {
        let mut row = vec![Cell::from(r.iter), Cell::Num(r.neg_elbo)];
        row.extend(param_cells(&r.params));
        t.push(row)?;
    }
    Ok(t)
}

fn stats_table() -> Table {
    Table::new(STATS_HEADER.iter().map(|s| s.to_string()).collect())
}

/// Rows `0..n_train` and `n_train..n` of a matrix.
fn split_rows(m: &DMatrix<f64>, test_fraction: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_train = n - n_test;
    (m.rows(0, n_train).into_owned(), m.rows(n_train, n_test).into_owned())
}

fn gamma_normal_data(cfg: &RunConfig, stream: &mut RandomStream) -> Result<GammaNormalData> {
    match &cfg.data.path {
        Some(p) => {
            let (_, m) = load_numeric_csv(p, 1)?;
            if m.ncols() != 1 {
                return Err(Error::Data {
                    row: Some(1),
                    column: None,
                    msg: format!("expected one column of observations, found {}", m.ncols()),
                });
            }
            GammaNormalData::new(m.column(0).iter().copied().collect(), 0.0, 5.0, 5.0)
        }
        None => {
            let s = &cfg.data.synthetic;
            synth_gamma_normal(stream, s.n.expect("filled"), s.tau.expect("filled"))
        }
    }
}

/// Regression rows with the target in the last column, before any split.
fn linreg_table(cfg: &RunConfig, stream: &mut RandomStream) -> Result<(DMatrix<f64>, DVector<f64>)> {
    match &cfg.data.path {
        Some(p) => {
            let (x, y) = load_regression_csv(p)?;
            Ok((decorrelate_features(&x), y))
        }
        None => {
            let s = &cfg.data.synthetic;
            let d = synth_linreg(stream, s.n.expect("filled"), s.dim.expect("filled"), s.tau.expect("filled"))?;
            Ok((decorrelate_features(&d.x), d.y))
        }
    }
}

fn student_table(cfg: &RunConfig, stream: &mut RandomStream) -> Result<DMatrix<f64>> {
    match &cfg.data.path {
        Some(p) => Ok(load_returns_csv(p)?.values),
        None => {
            let s = &cfg.data.synthetic;
            let d = s.dim.expect("filled");
            let data = synth_student(
                stream,
                s.n.expect("filled"),
                &DVector::zeros(d),
                &DMatrix::identity(d, d),
                s.nu.expect("filled"),
            )?;
            Ok(data.x)
        }
    }
}

/// Write the synthetic (or loaded and preprocessed) dataset a config
/// describes to `<output_dir>/data.csv`.
pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    let path = dir.join("data.csv");
    let mut streams = Streams::new(cfg.seed);
    match cfg.experiment {
        ExperimentKind::GammaNormalMse => {
            let d = gamma_normal_data(cfg, &mut streams.data)?;
            write_matrix_csv(&path, &["x".to_string()], &DMatrix::from_column_slice(d.x.len(), 1, &d.x))?;
        }
        ExperimentKind::LinregFit => {
            let (x, y) = linreg_table(cfg, &mut streams.data)?;
            let mut header: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
            header.push("y".into());
            let mut m = x.clone().insert_column(x.ncols(), 0.0);
            m.set_column(x.ncols(), &y);
            write_matrix_csv(&path, &header, &m)?;
        }
        ExperimentKind::StudentWishartFit | ExperimentKind::VarianceProbe => {
            let x = student_table(cfg, &mut streams.data)?;
            let mut t = Table::new(
                std::iter::once("date".to_string())
                    .chain((0..x.ncols()).map(|j| format!("a{j}")))
                    .collect(),
            );
            for i in 0..x.nrows() {
                let mut row = vec![Cell::from(format!("t{i}"))];
                row.extend(x.row(i).iter().map(|&v| Cell::Num(v)));
                t.push(row)?;
            }
            t.write_csv(&path)?;
        }
    }
    Ok(path)
}

/// Plan, learning rates and counts from the config's fit section.
fn configure_fit(cfg: &RunConfig, init: &VariationalParams, fit_seed: u64) -> Result<FitConfig> {
    let f = cfg.fit();
    let mut plan: EstimatorPlan = fit_plan(init, variant(f.estimator.expect("filled")));
    for (name, b) in &f.blocks {
        if let Some(m) = b.method {
            plan = plan.with(init, name, m)?;
        }
    }
    let mut fc = FitConfig::new(init, plan, fit_seed);
    fc.iterations = f.iterations.expect("filled");
    fc.n_samples = f.n_samples.expect("filled");
    fc.elbo_samples = f.elbo_samples.expect("filled");
    for (name, b) in &f.blocks {
        fc = fc.with_rate(init, name, b.learning_rate.expect("filled"))?;
    }
    Ok(fc)
}

/// Everything a fit experiment needs, built exactly as `run_experiment` does.
pub struct PreparedFit {
    pub model: Box<dyn TargetModel>,
    pub family: FamilySpec,
    pub init: VariationalParams,
    pub config: FitConfig,
    /// Held-out log loss at the given parameters.
    pub heldout: Box<dyn Fn(&VariationalParams, &mut RandomStream) -> Result<f64>>,
    pub n_test: usize,
}

/// Load data and build model, family, start and fit settings for a fit
/// experiment without running it.
pub fn prepare_fit(cfg: &RunConfig) -> Result<PreparedFit> {
    fit_setup(cfg, &mut Streams::new(cfg.seed))
}

fn fit_setup(cfg: &RunConfig, streams: &mut Streams) -> Result<PreparedFit> {
    let draws = cfg.fit().heldout_draws.expect("filled");
    let tf = cfg.data.test_fraction.expect("filled");
    match cfg.experiment {
        ExperimentKind::LinregFit => {
            let (x, y) = linreg_table(cfg, &mut streams.data)?;
            let ym = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
            let (x_train, x_test) = split_rows(&x, tf);
            let (y_train, y_test) = split_rows(&ym, tf);
            let data = LinRegData::new(x_train, y_train.column(0).into_owned(), 1.0, 5.0, 5.0)?;
            let d = data.dim();
            let family = linreg_family(d)?;
            let eps = cfg.block("tau.shape").epsilon.unwrap_or(1.0);
            let init = linreg_init(&family, d, eps)?;
            let config = configure_fit(cfg, &init, streams.fit_seed)?;
            let n_test = x_test.nrows();
            let fam = family.clone();
            let y_test = y_test.column(0).into_owned();
            Ok(PreparedFit {
                model: Box::new(LinReg::new(data)),
                family,
                init,
                config,
                heldout: Box::new(move |p, s| linreg_heldout_log_loss(&x_test, &y_test, &fam, p, s, draws)),
                n_test,
            })
        }
        ExperimentKind::StudentWishartFit | ExperimentKind::VarianceProbe => {
            let x = student_table(cfg, &mut streams.data)?;
            let (x_train, x_test) = split_rows(&x, tf);
            let data = StudentWishartData::new(x_train)?;
            let d = data.dim();
            let family = student_family(d)?;
            let df_eps = cfg.block("lambda.df").epsilon.unwrap_or(2.0 * d as f64);
            let shape_eps = cfg.block("nu.shape").epsilon.unwrap_or(1.0);
            let init = student_init(&family, &data, df_eps, shape_eps)?;
            let config = configure_fit(cfg, &init, streams.fit_seed)?;
            let n_test = x_test.nrows();
            let fam = family.clone();
            Ok(PreparedFit {
                model: Box::new(StudentWishart::new(data)),
                family,
                init,
                config,
                heldout: Box::new(move |p, s| student_heldout_log_loss(&x_test, &fam, p, s, draws)),
                n_test,
            })
        }
        ExperimentKind::GammaNormalMse => Err(Error::Contract("not a fit experiment".into())),
    }
}

fn write_run_json(
    dir: &Path,
    cfg: &RunConfig,
    started: Instant,
    files: &[PathBuf],
    summary: &serde_json::Value,
    error: Option<&Error>,
) -> Result<PathBuf> {
    let path = dir.join(RUN_FILE);
    let names: Vec<String> = files
        .iter()
        .filter_map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let doc = json!({
        "experiment": cfg.experiment.as_str(),
        "seed": cfg.seed,
        "config": cfg,
        "versions": { "vind": env!("CARGO_PKG_VERSION") },
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "status": if error.is_some() { "failed" } else { "ok" },
        "error": error.map(|e| e.to_string()),
        "outputs": names,
        "summary": summary,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}

/// Run the experiment in `cfg` and write its outputs to `cfg.output_dir()`.
///
/// When an estimator or optimizer fails mid-run the partial trace and a
/// `run.json` carrying the error are still written, then the error is
/// returned.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    let mut streams = Streams::new(cfg.seed);
    let mut files = Vec::new();
    let (summary, error) = match cfg.experiment {
        ExperimentKind::GammaNormalMse => (run_mse(cfg, &mut streams, &dir, &mut files)?, None),
        _ => run_fit(cfg, &mut streams, &dir, &mut files)?,
    };
    let json_path = write_run_json(&dir, cfg, started, &files, &summary, error.as_ref())?;
    files.push(json_path);
    match error {
        Some(e) => Err(e),
        None => Ok(RunOutcome { files, summary }),
    }
}

/// `log p(D)` of the Gamma-Normal model.
fn gamma_normal_evidence(data: &GammaNormalData) -> Result<f64> {
    let n = data.x.len() as f64;
    let (a, b) = (data.alpha0 + 0.5 * n, data.beta0 + 0.5 * data.sum_sq());
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI).ln() + data.alpha0 * data.beta0.ln() - ln_gamma(data.alpha0)?
        + ln_gamma(a)?
        - a * b.ln())
}

fn run_mse(
    cfg: &RunConfig,
    streams: &mut Streams,
    dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<serde_json::Value> {
    let data = gamma_normal_data(cfg, &mut streams.data)?;
    let evidence = gamma_normal_evidence(&data)?;
    let model = GammaNormal::new(data);
    let (a_star, b_star) = model.posterior();
    let m = cfg.mse();
    let sc = SweepConfig {
        epsilons: m.epsilons.clone().expect("filled"),
        iterations: m.iterations.expect("filled"),
        n_per_estimate: m.n_per_estimate.expect("filled"),
        n_reps: m.n_reps.expect("filled"),
        alpha_init: m.alpha_init.expect("filled"),
        learning_rate: m.learning_rate.expect("filled"),
    };
    let out = mse_sweep(&model, &sc, &mut streams.extra)?;

    let mut stats = stats_table();
    for r in &out.rows {
        stats.push(vec![
            r.iter.into(),
            r.estimator.as_str().into(),
            r.epsilon.into(),
            r.block.clone().into(),
            r.bias.into(),
            r.variance.into(),
            r.mse.into(),
        ])?;
    }
    let p = dir.join(STATS_FILE);
    stats.write_csv(&p)?;
    files.push(p);

    // exact negative ELBO along the ascent path
    let mut trace = Table::new(vec!["iter".into(), "neg_elbo".into(), "tau.shape".into(), "tau.rate".into()]);
    for (i, &a) in out.alphas.iter().enumerate() {
        let neg_elbo = kl_gamma(a, b_star, a_star, b_star)? - evidence;
        trace.push(vec![i.into(), neg_elbo.into(), a.into(), b_star.into()])?;
    }
    let p = dir.join(TRACE_FILE);
    trace.write_csv(&p)?;
    files.push(p);

    Ok(json!({
        "posterior_shape": a_star,
        "posterior_rate": b_star,
        "log_evidence": evidence,
        "final_shape": out.alphas.last(),
        "rows": out.rows.len(),
    }))
}

fn run_fit(
    cfg: &RunConfig,
    streams: &mut Streams,
    dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<(serde_json::Value, Option<Error>)> {
    let setup = fit_setup(cfg, streams)?;
    let trace = fit(setup.model.as_ref(), &setup.family, &setup.init, &setup.config)?;

    let p = dir.join(TRACE_FILE);
    trace_table(&trace)?.write_csv(&p)?;
    files.push(p);

    let mut error = trace.aborted.clone();
    let mut summary = json!({
        "iterations_completed": trace.records.len() - 1,
        "final_neg_elbo": trace.last().neg_elbo,
        "final_neg_elbo_smoothed": smooth(&trace.neg_elbo(), 50).last(),
        "estimator": estimator_label(cfg.fit().estimator.expect("filled")),
    });

    if setup.n_test > 0 {
        let every = cfg.fit().heldout_every.expect("filled");
        let mut t = Table::new(vec!["iter".into(), "heldout_log_loss".into()]);
        let last = trace.records.len() - 1;
        for r in trace.records.iter().filter(|r| r.iter % every == 0 || r.iter == last) {
            let mut s = streams.heldout.fork();
            match (setup.heldout)(&r.params, &mut s) {
                Ok(v) => t.push(vec![r.iter.into(), v.into()])?,
                Err(e) => {
                    error.get_or_insert(e);
                    break;
                }
            }
        }
        if let Some(Cell::Num(v)) = t.rows.last().map(|r| r[1].clone()) {
            summary["final_heldout_log_loss"] = json!(v);
        }
        let p = dir.join(HELDOUT_FILE);
        t.write_csv(&p)?;
        files.push(p);
    }

    if cfg.experiment == ExperimentKind::VarianceProbe && error.is_none() {
        let pr = cfg.probe();
        let estimators: Vec<ProbeEstimator> = pr
            .estimators
            .as_ref()
            .expect("filled")
            .iter()
            .map(|&e| ProbeEstimator {
                label: estimator_label(e).to_string(),
                plan: fit_plan(&setup.init, variant(e)),
            })
            .collect();
        let snapshots: Vec<(usize, VariationalParams)> =
            trace.records.iter().map(|r| (r.iter, r.params.clone())).collect();
        let rows = variance_probe(
            setup.model.as_ref(),
            &setup.family,
            &snapshots,
            &estimators,
            pr.every.expect("filled"),
            pr.n_probe.expect("filled"),
            &mut streams.extra,
        )?;
        let mut stats = stats_table();
        for r in rows {
            let Some(block) = setup.init.block(&r.block) else { continue };
            if !block.kind.is_fd() {
                continue;
            }
            let eps = if r.estimator.starts_with("vind") {
                block.kind.epsilon()
            } else {
                None
            };
            stats.push(vec![
                r.iter.into(),
                r.estimator.into(),
                eps.into(),
                r.block.into(),
                Cell::Empty,
                r.variance.into(),
                Cell::Empty,
            ])?;
        }
        let p = dir.join(STATS_FILE);
        stats.write_csv(&p)?;
        files.push(p);
    }
    Ok((summary, error))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::kl_gamma;

    #[test]
    fn evidence_matches_ratio_identity() {
        // log p(D) = log p(D, τ) - log p(τ | D) at any τ
        let data = GammaNormalData::new(vec![0.3, -1.2, 0.8], 0.0, 2.0, 3.0).unwrap();
        let model = GammaNormal::new(data.clone());
        let (a, b) = model.posterior();
        let tau: f64 = 0.7;
        let log_post = a * b.ln() - ln_gamma(a).unwrap() + (a - 1.0) * tau.ln() - b * tau;
        let ev = gamma_normal_evidence(&data).unwrap();
        assert!((ev - (model.log_joint(tau) - log_post)).abs() < 1e-12);
        assert!(kl_gamma(a, b, a, b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn param_columns_layout() {
        let fam = student_family(2).unwrap();
        let x = DMatrix::from_row_slice(4, 2, &[0.1, 0.2, -0.3, 0.1, 0.5, -0.2, 0.0, 0.3]);
        let data = StudentWishartData::new(x).unwrap();
        let p = student_init(&fam, &data, 4.0, 1.0).unwrap();
        let cols = param_columns(&p);
        assert_eq!(
            cols,
            vec![
                "mu.loc[0]",
                "mu.loc[1]",
                "mu.scale",
                "lambda.df",
                "lambda.scale_root[0,0]",
                "lambda.scale_root[0,1]",
                "lambda.scale_root[1,1]",
                "nu.shape",
                "nu.rate"
            ]
        );
        assert_eq!(param_cells(&p).len(), cols.len());
    }
}
