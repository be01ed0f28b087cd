//! Experiment runner: config ingestion, exact-norm noise synthesis, batch
//! noise sweeps, and trace/report emission.
//!
//! A run reads one TOML config, builds the problem and penalty, calibrates
//! the assumption constants with the config seed, then solves once per
//! noise level. Each run writes an 8-column trace CSV; the experiment
//! writes one `summary.json` holding the resolved config, per-run reports,
//! and the sweep table. Identical config and seed reproduce the output
//! files byte for byte.

use crate::diagnostics::{audit, delta_sweep, SweepTable, TheoryReport, SUM_TOL, THETA_TOL};
use crate::geometry::{PrimalVec, SpaceModel};
use crate::operators::{make_deconv, make_diagexp, ForwardProblem};
use crate::penalty::Penalty;
use crate::solver::{IterationTrace, Solver, SolverConfig, SolverError, StopReason};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable overriding the output directory of `run`/`sweep`.
pub const OUTPUT_DIR_ENV: &str = "TPGRAD_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("descent margin refusal: {0}")]
    Margin(String),
    #[error("numeric blowup: {0}")]
    Blowup(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("audit mismatch: {0}")]
    AuditMismatch(String),
}

impl CliError {
    /// Process exit code: 2 config/input, 3 margin refusal, 4 numeric
    /// blowup, 1 audit mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Margin(_) => 3,
            CliError::Blowup(_) => 4,
            CliError::AuditMismatch(_) => 1,
        }
    }
}

impl From<SolverError> for CliError {
    fn from(err: SolverError) -> Self {
        match err {
            SolverError::NonpositiveMargin(b) => CliError::Margin(b.to_string()),
            SolverError::NumericBlowup { k } => {
                CliError::Blowup(format!("iterate became non-finite at step {k}"))
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Deconv,
    Diagexp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub n: usize,
    /// Gaussian kernel width (deconv only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_width: Option<f64>,
    /// Diagonal scale factor (diagexp only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_scale: Option<f64>,
    /// Force the tangential cone constant instead of the estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_override: Option<f64>,
    /// Force the stability constant instead of the estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability_override: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKindSpec {
    PowerNorm,
    QuadraticL1,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub kind: PenaltyKindSpec,
    /// Convexity order (power_norm only; the space exponent follows it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// l1 weight (quadratic_l1 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

fn default_r_v() -> f64 {
    2.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    /// Data-space norm exponent.
    #[serde(default = "default_r_v")]
    pub r_v: f64,
}

impl Default for SpaceSpec {
    fn default() -> Self {
        Self { r_v: default_r_v() }
    }
}

fn default_samples() -> usize {
    400
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Sample count for the assumption-constant estimators.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            samples: default_samples(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub noise_levels: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub problem: ProblemSpec,
    pub penalty: PenaltySpec,
    #[serde(default)]
    pub space: SpaceSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub calibration: CalibrationSpec,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.noise_levels.is_empty() {
            return Err(CliError::Config("noise_levels must be non-empty".into()));
        }
        for &d in &self.noise_levels {
            if d < 0.0 || !d.is_finite() {
                return Err(CliError::Config(format!("invalid noise level {d}")));
            }
        }
        if !(self.space.r_v > 1.0) {
            return Err(CliError::Config(format!(
                "data-space exponent r_v must exceed 1, got {}",
                self.space.r_v
            )));
        }
        self.solver.validate().map_err(CliError::from)?;
        match self.problem.kind {
            ProblemKind::Deconv => {
                if self.problem.kernel_width.is_none() {
                    return Err(CliError::Config(
                        "deconv problem requires kernel_width".into(),
                    ));
                }
            }
            ProblemKind::Diagexp => {
                if self.problem.sigma_scale.is_none() {
                    return Err(CliError::Config(
                        "diagexp problem requires sigma_scale".into(),
                    ));
                }
            }
        }
        match self.penalty.kind {
            PenaltyKindSpec::PowerNorm => {
                if self.penalty.p.is_none() {
                    return Err(CliError::Config("power_norm penalty requires p".into()));
                }
            }
            PenaltyKindSpec::QuadraticL1 => {
                if self.penalty.beta.is_none() {
                    return Err(CliError::Config(
                        "quadratic_l1 penalty requires beta".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Build the penalty and calibrated forward problem described by a config.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<(Penalty, ForwardProblem), CliError> {
    let n = cfg.problem.n;
    let pen = match cfg.penalty.kind {
        PenaltyKindSpec::PowerNorm => {
            let p = cfg.penalty.p.expect("validated");
            let space = SpaceModel::new(n, p).map_err(|e| CliError::Config(e.to_string()))?;
            Penalty::power_norm(space, p).map_err(|e| CliError::Config(e.to_string()))?
        }
        PenaltyKindSpec::QuadraticL1 => {
            let beta = cfg.penalty.beta.expect("validated");
            let space = SpaceModel::new(n, 2.0).map_err(|e| CliError::Config(e.to_string()))?;
            Penalty::quadratic_l1(space, beta).map_err(|e| CliError::Config(e.to_string()))?
        }
    };
    let mut fp = match cfg.problem.kind {
        ProblemKind::Deconv => make_deconv(n, cfg.problem.kernel_width.expect("validated"), &pen)
            .map_err(|e| CliError::Config(e.to_string()))?,
        ProblemKind::Diagexp => make_diagexp(n, cfg.problem.sigma_scale.expect("validated"), &pen)
            .map_err(|e| CliError::Config(e.to_string()))?,
    };
    if cfg.space.r_v != 2.0 {
        return Err(CliError::Config(
            "bundled problems are generated with an l^2 data space; set r_v = 2".into(),
        ));
    }
    fp.calibrate(&pen, cfg.calibration.samples, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(eta) = cfg.problem.eta_override {
        fp.set_eta(eta);
    }
    if let Some(c) = cfg.problem.stability_override {
        fp.set_stability(c);
    }
    Ok((pen, fp))
}

/// Perturb `v` to exact distance `delta` in the data norm:
/// `v_delta = v + delta * xi / ||xi||` with a seeded direction `xi`.
pub fn add_noise(
    v: &PrimalVec,
    delta: f64,
    seed: u64,
    space_v: SpaceModel,
) -> Result<PrimalVec, CliError> {
    if delta < 0.0 || !delta.is_finite() {
        return Err(CliError::Config(format!("invalid noise level {delta}")));
    }
    if delta == 0.0 {
        return Ok(v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = v.len();
    let xi: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let xi = PrimalVec::from_raw(xi);
    let nrm = space_v.norm(&xi);
    if nrm == 0.0 {
        return Err(CliError::Config("degenerate noise direction".into()));
    }
    let scale = delta / nrm;
    Ok(PrimalVec::from_raw(
        v.coords()
            .iter()
            .zip(xi.coords())
            .map(|(a, b)| a + scale * b)
            .collect(),
    ))
}

fn noise_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Summary of one run as written to `summary.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub delta: f64,
    pub k_delta: usize,
    pub stop_reason: StopReason,
    pub final_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bregman_to_truth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_error: Option<f64>,
    pub report: TheoryReport,
    pub trace_file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub theta5: f64,
    pub runs: Vec<RunSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepTable>,
    pub sweep_trend_violations: Vec<String>,
    pub violations: usize,
}

/// In-memory artifacts of one experiment, before/after emission.
pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub traces: Vec<IterationTrace>,
    pub out_dir: PathBuf,
}

const CSV_HEADER: &str = "k,residual_norm,upsilon,lambda,alpha,t_k,bregman_to_truth,theta_k";

fn write_trace_csv(path: &Path, trace: &IterationTrace) -> Result<(), CliError> {
    let mut text = String::with_capacity(64 * (trace.steps.len() + 1));
    text.push_str(CSV_HEADER);
    text.push('\n');
    for s in &trace.steps {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.k,
            s.residual_norm,
            s.upsilon,
            s.lambda,
            s.alpha,
            s.t_k,
            s.bregman_to_truth,
            s.theta_k
        ));
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Parsed trace CSV row (the emitted subset of a step record).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsvRow {
    pub k: usize,
    pub residual_norm: f64,
    pub upsilon: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub t_k: f64,
    pub bregman_to_truth: f64,
    pub theta_k: f64,
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<CsvRow>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(CliError::AuditMismatch(format!(
                "unexpected CSV header {other:?} in {}",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(CliError::AuditMismatch(format!(
                "row {i} of {} has {} fields",
                path.display(),
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64, CliError> {
            s.parse::<f64>()
                .map_err(|e| CliError::AuditMismatch(format!("bad float {s:?}: {e}")))
        };
        rows.push(CsvRow {
            k: fields[0]
                .parse::<usize>()
                .map_err(|e| CliError::AuditMismatch(format!("bad index {:?}: {e}", fields[0])))?,
            residual_norm: parse(fields[1])?,
            upsilon: parse(fields[2])?,
            lambda: parse(fields[3])?,
            alpha: parse(fields[4])?,
            t_k: parse(fields[5])?,
            bregman_to_truth: parse(fields[6])?,
            theta_k: parse(fields[7])?,
        });
    }
    Ok(rows)
}

/// Resolve the output directory: explicit flag, then the environment
/// override, then the config entry, then `./tpgrad-out`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("tpgrad-out"))
}

/// Run the whole experiment described by `cfg` and write traces plus the
/// summary into `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentOutcome, CliError> {
    cfg.validate()?;
    let (pen, fp) = build_problem(cfg)?;
    let truth = fp
        .u_dagger()
        .cloned()
        .ok_or_else(|| CliError::Config("bundled problems carry an exact solution".into()))?;
    let v_exact = fp.apply(&truth);
    let solver = Solver::new(&cfg.solver, &pen, &fp);
    let theta5 = solver.theta5();
    if !(theta5.value > 0.0) {
        return Err(CliError::Margin(theta5.to_string()));
    }

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut runs = Vec::new();
    let mut traces = Vec::new();
    for (idx, &delta) in cfg.noise_levels.iter().enumerate() {
        let v_delta = add_noise(&v_exact, delta, noise_seed(cfg.seed, idx), fp.space_v())?;
        let trace = solver.run(&v_delta, delta)?;
        let report = audit(&trace, &pen, &fp, &cfg.solver, Some(&truth));
        let trace_file = format!("trace_{idx:02}.csv");
        write_trace_csv(&out_dir.join(&trace_file), &trace)?;
        runs.push(RunSummary {
            delta,
            k_delta: trace.stop_index,
            stop_reason: trace.stop_reason,
            final_residual: trace.final_residual_norm,
            bregman_to_truth: Some(pen.bregman_value(&truth, &trace.final_u, &trace.final_gamma)),
            norm_error: Some(fp.space_u().norm(&trace.final_u.sub(&truth))),
            report,
            trace_file,
        });
        traces.push(trace);
    }

    let distinct_levels = {
        let mut ds = cfg.noise_levels.clone();
        ds.sort_by(f64::total_cmp);
        ds.dedup();
        ds.len()
    };
    let (sweep, trend_violations) = if traces.len() >= 3 && distinct_levels >= 3 {
        let refs: Vec<&IterationTrace> = traces.iter().collect();
        let table =
            delta_sweep(&refs, &pen, &fp, &truth).map_err(|e| CliError::Config(e.to_string()))?;
        let violations = table.trend_violations(0.05);
        (Some(table), violations)
    } else {
        (None, Vec::new())
    };

    let mut violations: usize = runs.iter().map(|r| r.report.violation_count()).sum();
    violations += trend_violations.len();

    let summary = ExperimentSummary {
        config: cfg.clone(),
        theta5: theta5.value,
        runs,
        sweep,
        sweep_trend_violations: trend_violations,
        violations,
    };
    let summary_path = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Config(format!("summary serialization failed: {e}")))?;
    fs::write(&summary_path, json).map_err(io_err(&summary_path))?;

    Ok(ExperimentOutcome {
        summary,
        traces,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Re-audit an emitted trace directory against its own `summary.json`.
///
/// The problem is rebuilt deterministically from the embedded config, each
/// CSV is re-read, and every check derivable from the emitted columns is
/// recomputed and compared with the stored report: row counts, the stopping
/// residual contract, Bregman monotonicity, the consistency of `theta_k`
/// with the Bregman column, and the summed step-weighted residual bound.
pub fn audit_dir(dir: &Path) -> Result<ExperimentSummary, CliError> {
    let summary_path = dir.join("summary.json");
    let text = fs::read_to_string(&summary_path).map_err(io_err(&summary_path))?;
    let summary: ExperimentSummary = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", summary_path.display())))?;
    let cfg = &summary.config;
    cfg.validate()?;
    let (pen, fp) = build_problem(cfg)?;
    let truth = fp
        .u_dagger()
        .cloned()
        .ok_or_else(|| CliError::Config("bundled problems carry an exact solution".into()))?;
    let d0 = pen.bregman_value(&truth, fp.u0(), fp.gamma0());

    for run in &summary.runs {
        let rows = read_trace_csv(&dir.join(&run.trace_file))?;
        let fail = |msg: String| -> Result<(), CliError> {
            Err(CliError::AuditMismatch(format!(
                "{} (delta {}): {msg}",
                run.trace_file, run.delta
            )))
        };
        if rows.len() != run.k_delta + 1 {
            fail(format!(
                "row count {} != k_delta + 1 = {}",
                rows.len(),
                run.k_delta + 1
            ))?;
        }
        if rows.iter().enumerate().any(|(i, r)| r.k != i) {
            fail("step indices are not contiguous".into())?;
        }
        let last = rows.last().expect("nonempty trace");
        if run.stop_reason == StopReason::Discrepancy
            && last.residual_norm > cfg.solver.tau * run.delta
        {
            fail(format!(
                "stopping residual {} exceeds tau*delta = {}",
                last.residual_norm,
                cfg.solver.tau * run.delta
            ))?;
        }
        let mut monotone = 0usize;
        let mut prev_breg: Option<f64> = None;
        let mut sum_total = 0.0;
        for row in &rows {
            if let Some(pb) = prev_breg {
                let expected = row.bregman_to_truth - pb;
                if (row.theta_k - expected).abs() > 1e-12 * expected.abs().max(1.0) {
                    fail(format!(
                        "theta_k column inconsistent with bregman column at k = {}",
                        row.k
                    ))?;
                }
                if row.theta_k > THETA_TOL {
                    monotone += 1;
                }
            } else if row.theta_k != 0.0 {
                fail("theta_k must be zero at k = 0".into())?;
            }
            prev_breg = Some(row.bregman_to_truth);
            sum_total += row.upsilon * crate::solver::fpow(row.residual_norm, cfg.solver.s);
        }
        if Some(monotone) != run.report.monotone_violations {
            fail(format!(
                "recomputed monotone violations {monotone} != stored {:?}",
                run.report.monotone_violations
            ))?;
        }
        let bound = cfg.solver.zeta / (cfg.solver.zeta - 1.0) * d0 / summary.theta5;
        if let Some(stored_bound) = run.report.sum_bound {
            if (bound - stored_bound).abs() > 1e-9 * stored_bound.abs().max(1.0) {
                fail(format!(
                    "recomputed sum bound {bound} != stored {stored_bound}"
                ))?;
            }
        }
        if (sum_total - run.report.sum_total).abs() > 1e-9 * run.report.sum_total.max(1.0) {
            fail(format!(
                "recomputed weighted residual sum {sum_total} != stored {}",
                run.report.sum_total
            ))?;
        }
        if sum_total > bound + SUM_TOL {
            fail(format!("summed bound violated: {sum_total} > {bound}"))?;
        }
    }
    Ok(summary)
}
