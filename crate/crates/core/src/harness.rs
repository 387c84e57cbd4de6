//! Experiment files: TOML configuration, solver dispatch and the CSV/text
//! artifacts written by a run.
//!
//! A configuration names one plant, one cost, one solver and its options.
//! Matrices are written either as a scalar (multiple of the identity), as
//! `{ diag = [...] }` or as `{ full = [...] }` in row-major order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::ddp::{solve_ddp, solve_spdp, DdpOptions};
use crate::models::{CartPole, NLinkArm, Pendulum, QuadraticCost, SystemSpec};
use crate::policy::Rollout;
use crate::quadrature::{make_rule, RuleFamily};
use crate::sppdp::SolverConfig;
use crate::trace::relative_change;
use crate::{spbsc, sppdp, Error, Policy, ProblemInstance, Result, SolveTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    Pendulum,
    CartPole,
    NLinkArm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverId {
    Ddp,
    Spdp,
    Sppdp,
    Spbsc,
}

impl SolverId {
    pub fn name(self) -> &'static str {
        match self {
            SolverId::Ddp => "ddp",
            SolverId::Spdp => "spdp",
            SolverId::Sppdp => "sppdp",
            SolverId::Spbsc => "spbsc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagonalSpec {
    pub diag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullSpec {
    pub full: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diagonal(DiagonalSpec),
    Full(FullSpec),
}

impl MatrixSpec {
    pub fn to_matrix(&self, n: usize, field: &str) -> Result<DMatrix<f64>> {
        let m = match self {
            MatrixSpec::Scalar(s) => DMatrix::identity(n, n) * *s,
            MatrixSpec::Diagonal(d) => {
                if d.diag.len() != n {
                    return Err(config_err(field, format!("diagonal has {} entries, expected {n}", d.diag.len())));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(&d.diag))
            }
            MatrixSpec::Full(f) => {
                if f.full.len() != n * n {
                    return Err(config_err(field, format!("full matrix has {} entries, expected {}", f.full.len(), n * n)));
                }
                DMatrix::from_row_slice(n, n, &f.full)
            }
        };
        if m.iter().any(|v| !v.is_finite()) {
            return Err(config_err(field, "non-finite entry".into()));
        }
        if (&m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
            return Err(config_err(field, "matrix is not symmetric".into()));
        }
        Ok(m)
    }
}

/// Plant parameters; every field is optional and only those belonging to
/// the selected system may appear.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    pub mass: Option<f64>,
    pub length: Option<f64>,
    pub gravity: Option<f64>,
    pub damping: Option<f64>,
    pub cart_mass: Option<f64>,
    pub pole_mass: Option<f64>,
    pub pole_length: Option<f64>,
    pub links: Option<usize>,
}

fn default_rule() -> String {
    "gh3".into()
}
fn default_lambda() -> f64 {
    1.0
}
fn default_max_iters() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-6
}
fn default_stall_window() -> usize {
    3
}
fn default_out_dir() -> PathBuf {
    PathBuf::from(".")
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Stem of every output file.
    pub name: String,
    pub system: SystemId,
    #[serde(default)]
    pub plant: PlantParams,
    pub horizon: usize,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub goal: Vec<f64>,
    pub initial_cov: MatrixSpec,
    pub w: MatrixSpec,
    pub r: MatrixSpec,
    pub w_terminal: MatrixSpec,
    pub solver: SolverId,
    #[serde(default = "default_rule")]
    pub rule: String,
    #[serde(default = "default_lambda")]
    pub lambda_init: f64,
    #[serde(default = "default_true")]
    pub temperature_update: bool,
    /// Covariance of the initial policy (required by sppdp and spbsc).
    pub prior_cov: Option<MatrixSpec>,
    /// Fixed joint covariance of SP-DP (required by spdp).
    pub spdp_cov: Option<MatrixSpec>,
    #[serde(default)]
    pub second_order: bool,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_stall_window")]
    pub stall_window: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub record_wall_time: bool,
}

fn config_err(field: &str, message: String) -> Error {
    Error::Config(format!("{field}: {message}"))
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(1),
            message: e.message().trim().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn rule_family(&self) -> Result<RuleFamily> {
        self.rule.parse().map_err(|_| config_err("rule", format!("unknown rule `{}` (expected ut3, ut5 or gh3)", self.rule)))
    }

    /// Checks everything that can be checked without building the plant.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(config_err("name", "must be a non-empty file stem".into()));
        }
        if self.horizon == 0 {
            return Err(config_err("horizon", "must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(config_err("dt", "must be positive".into()));
        }
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return Err(config_err("lambda_init", "must be positive".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(config_err("tol", "must be nonnegative".into()));
        }
        if self.stall_window == 0 {
            return Err(config_err("stall_window", "must be at least 1".into()));
        }
        self.rule_family()?;
        let allowed: &[&str] = match self.system {
            SystemId::Pendulum => &["mass", "length", "gravity", "damping"],
            SystemId::CartPole => &["cart_mass", "pole_mass", "pole_length", "gravity"],
            SystemId::NLinkArm => &["links", "mass", "length", "gravity", "damping"],
        };
        let p = &self.plant;
        let present = [
            ("mass", p.mass.is_some()),
            ("length", p.length.is_some()),
            ("gravity", p.gravity.is_some()),
            ("damping", p.damping.is_some()),
            ("cart_mass", p.cart_mass.is_some()),
            ("pole_mass", p.pole_mass.is_some()),
            ("pole_length", p.pole_length.is_some()),
            ("links", p.links.is_some()),
        ];
        for (key, set) in present {
            if set && !allowed.contains(&key) {
                return Err(config_err(&format!("plant.{key}"), format!("not a parameter of {:?}", self.system)));
            }
        }
        match self.solver {
            SolverId::Sppdp | SolverId::Spbsc if self.prior_cov.is_none() => {
                Err(config_err("prior_cov", format!("required by solver {}", self.solver.name())))
            }
            SolverId::Spdp if self.spdp_cov.is_none() => Err(config_err("spdp_cov", "required by solver spdp".into())),
            _ => Ok(()),
        }
    }

    pub fn build_system(&self) -> Result<SystemSpec<f64>> {
        let p = &self.plant;
        let positive = |v: Option<f64>, key: &str, default: f64| -> Result<f64> {
            let v = v.unwrap_or(default);
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(config_err(&format!("plant.{key}"), "must be positive".into()))
            }
        };
        let nonneg = |v: Option<f64>, key: &str, default: f64| -> Result<f64> {
            let v = v.unwrap_or(default);
            if v >= 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(config_err(&format!("plant.{key}"), "must be nonnegative".into()))
            }
        };
        match self.system {
            SystemId::Pendulum => {
                let d = Pendulum::default();
                let plant = Pendulum {
                    mass: positive(p.mass, "mass", d.mass)?,
                    length: positive(p.length, "length", d.length)?,
                    gravity: nonneg(p.gravity, "gravity", d.gravity)?,
                    damping: nonneg(p.damping, "damping", d.damping)?,
                };
                SystemSpec::pendulum(plant, self.dt, self.horizon)
            }
            SystemId::CartPole => {
                let d = CartPole::default();
                let plant = CartPole {
                    cart_mass: positive(p.cart_mass, "cart_mass", d.cart_mass)?,
                    pole_mass: positive(p.pole_mass, "pole_mass", d.pole_mass)?,
                    pole_length: positive(p.pole_length, "pole_length", d.pole_length)?,
                    gravity: nonneg(p.gravity, "gravity", d.gravity)?,
                };
                SystemSpec::cart_pole(plant, self.dt, self.horizon)
            }
            SystemId::NLinkArm => {
                let links = p.links.unwrap_or(3);
                if links == 0 {
                    return Err(config_err("plant.links", "must be at least 1".into()));
                }
                let d = NLinkArm::uniform(links);
                let mass = positive(p.mass, "mass", d.masses[0])?;
                let length = positive(p.length, "length", d.lengths[0])?;
                let plant = NLinkArm {
                    masses: vec![mass; links],
                    lengths: vec![length; links],
                    damping: nonneg(p.damping, "damping", d.damping)?,
                    gravity: nonneg(p.gravity, "gravity", d.gravity)?,
                };
                SystemSpec::n_link_arm(plant, self.dt, self.horizon)
            }
        }
    }

    pub fn build_instance(&self) -> Result<ProblemInstance> {
        let system = self.build_system()?;
        let nx = system.state_dim();
        let nu = system.control_dim();
        let vector = |v: &[f64], field: &str| -> Result<DVector<f64>> {
            if v.len() != nx {
                return Err(config_err(field, format!("has {} entries, expected n_x = {nx}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(config_err(field, "non-finite entry".into()));
            }
            Ok(DVector::from_column_slice(v))
        };
        let x0 = vector(&self.x0, "x0")?;
        let goal = vector(&self.goal, "goal")?;
        let w = self.w.to_matrix(nx, "w")?;
        let r = self.r.to_matrix(nu, "r")?;
        let wt = self.w_terminal.to_matrix(nx, "w_terminal")?;
        let cov = self.initial_cov.to_matrix(nx, "initial_cov")?;
        let cost = QuadraticCost::new(goal, w, r, wt).map_err(|e| config_err("w, r, w_terminal", e.to_string()))?;
        ProblemInstance::new(system, cost, x0, cov).map_err(|e| config_err("initial_cov", e.to_string()))
    }

    pub fn initial_policy(&self, instance: &ProblemInstance) -> Result<Policy> {
        let nu = instance.control_dim();
        let cov = match &self.prior_cov {
            Some(spec) => spec.to_matrix(nu, "prior_cov")?,
            None => DMatrix::zeros(nu, nu),
        };
        Policy::prior(instance.horizon(), instance.state_dim(), &cov).map_err(|e| config_err("prior_cov", e.to_string()))
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        Ok(SolverConfig {
            rule: self.rule_family()?,
            lambda_init: self.lambda_init,
            max_iters: self.max_iters,
            tol: self.tol,
            stall_window: self.stall_window,
            temperature_update: self.temperature_update,
        })
    }

    pub fn ddp_options(&self) -> DdpOptions {
        DdpOptions {
            max_iters: self.max_iters,
            tol: self.tol,
            stall_window: self.stall_window,
        }
    }

    pub fn trace_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.trace.csv", self.name))
    }

    pub fn policy_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.policy.txt", self.name))
    }

    pub fn trajectory_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.traj.csv", self.name))
    }

    pub fn samples_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.samples.csv", self.name))
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub max_iters: Option<usize>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        if let Some(d) = &self.out_dir {
            config.out_dir = d.clone();
        }
        if let Some(m) = self.max_iters {
            config.max_iters = m;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(t) = self.tol {
            config.tol = t;
        }
        config.validate()
    }
}

/// Runs the configured solver from the configured prior.
pub fn solve(config: &ExperimentConfig, instance: &ProblemInstance) -> Result<(Policy, SolveTrace)> {
    let initial = config.initial_policy(instance)?;
    match config.solver {
        SolverId::Ddp => solve_ddp(instance, &config.ddp_options(), config.second_order, &initial),
        SolverId::Spdp => {
            let n = instance.system.joint_dim();
            let cov = config
                .spdp_cov
                .as_ref()
                .ok_or_else(|| config_err("spdp_cov", "required by solver spdp".into()))?
                .to_matrix(n, "spdp_cov")?;
            let rule = make_rule(config.rule_family()?, n)?;
            solve_spdp(instance, &config.ddp_options(), rule, cov, &initial)
        }
        SolverId::Sppdp => sppdp::solve(instance, &config.solver_config()?, &initial),
        SolverId::Spbsc => spbsc::solve(instance, &config.solver_config()?, &initial),
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub converged: bool,
    pub final_cost: f64,
    pub iterations: usize,
    pub trace_path: PathBuf,
    pub policy_path: PathBuf,
    pub trajectory_path: PathBuf,
}

impl RunReport {
    /// 0 on convergence, 2 when the iteration budget ran out.
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            2
        }
    }
}

/// Solves and writes the trace, final policy and mean trajectory.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    let instance = config.build_instance()?;
    let (policy, trace) = solve(config, &instance)?;
    let rollout = policy.rollout_mean(&instance)?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let report = RunReport {
        converged: trace.converged,
        final_cost: trace.final_cost().unwrap_or(f64::NAN),
        iterations: trace.iterations(),
        trace_path: config.trace_path(),
        policy_path: config.policy_path(),
        trajectory_path: config.trajectory_path(),
    };
    trace.write_csv(&report.trace_path, config.record_wall_time)?;
    policy.write(&report.policy_path)?;
    write_text(&report.trajectory_path, &trajectory_csv(&rollout))?;
    Ok(report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn push_row(s: &mut String, lead: &[String], x: &DVector<f64>, u: Option<&DVector<f64>>, nu: usize) {
    s.push_str(&lead.join(","));
    for v in x.iter() {
        let _ = write!(s, ",{v:.16e}");
    }
    for i in 0..nu {
        match u {
            Some(u) => {
                let _ = write!(s, ",{:.16e}", u[i]);
            }
            None => s.push(','),
        }
    }
    s.push('\n');
}

fn trajectory_header(lead: &str, nx: usize, nu: usize) -> String {
    let mut h = lead.to_string();
    for i in 1..=nx {
        let _ = write!(h, ",x_{i}");
    }
    for i in 1..=nu {
        let _ = write!(h, ",u_{i}");
    }
    h.push('\n');
    h
}

/// `t,x_1..x_nx,u_1..u_nu`, with empty action fields on the terminal row.
pub fn trajectory_csv(rollout: &Rollout<f64>) -> String {
    let nx = rollout.states[0].len();
    let nu = rollout.actions.first().map_or(0, |u| u.len());
    let mut s = trajectory_header("t", nx, nu);
    for (t, x) in rollout.states.iter().enumerate() {
        push_row(&mut s, &[t.to_string()], x, rollout.actions.get(t), nu);
    }
    s
}

/// Seeded stochastic rollouts of `policy` as `sample,t,x..,u..` rows.
pub fn sample_rollouts(instance: &ProblemInstance, policy: &Policy, count: usize, seed: u64) -> Result<String> {
    if policy.state_dim() != instance.state_dim()
        || policy.control_dim() != instance.control_dim()
        || policy.horizon() != instance.horizon()
    {
        return Err(Error::InvalidArgument(format!(
            "policy has (T, n_x, n_u) = ({}, {}, {}) but the config describes ({}, {}, {})",
            policy.horizon(),
            policy.state_dim(),
            policy.control_dim(),
            instance.horizon(),
            instance.state_dim(),
            instance.control_dim()
        )));
    }
    let rollouts = policy.rollout_sampled(instance, seed, count)?;
    let (nx, nu) = (instance.state_dim(), instance.control_dim());
    let mut s = trajectory_header("sample,t", nx, nu);
    for (k, r) in rollouts.iter().enumerate() {
        for (t, x) in r.states.iter().enumerate() {
            push_row(&mut s, &[k.to_string(), t.to_string()], x, r.actions.get(t), nu);
        }
    }
    Ok(s)
}

/// Reads `policy_path`, samples it on the configured instance and writes
/// `<name>.samples.csv` under `out_dir`.
pub fn run_samples(config: &ExperimentConfig, policy_path: &Path, count: usize, seed: u64) -> Result<PathBuf> {
    let instance = config.build_instance()?;
    let policy = Policy::read(policy_path)?;
    let text = sample_rollouts(&instance, &policy, count, seed)?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let path = config.samples_path();
    write_text(&path, &text)?;
    Ok(path)
}

/// One row of the `compare` table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub final_cost: f64,
    pub iterations: usize,
    /// First iteration whose cost is within `tol` (relative) of the final cost.
    pub iterations_to_tol: usize,
    pub wall_time_ms: f64,
    /// `(c₀ − c₁) / c₀`, or 0 for a trace without iterations.
    pub first_iteration_drop: f64,
}

pub fn summarize(label: &str, trace: &SolveTrace, tol: f64) -> CompareRow {
    let records = &trace.records;
    let last = records.last().map_or(f64::NAN, |r| r.total_cost);
    let iterations_to_tol = records
        .iter()
        .find(|r| relative_change(r.total_cost, last) <= tol)
        .map_or(0, |r| r.iter);
    let first_iteration_drop = match records.as_slice() {
        [a, b, ..] => (a.total_cost - b.total_cost) / a.total_cost,
        _ => 0.0,
    };
    CompareRow {
        label: label.to_string(),
        final_cost: last,
        iterations: trace.iterations(),
        iterations_to_tol,
        wall_time_ms: records.last().map_or(0.0, |r| r.time_ms),
        first_iteration_drop,
    }
}

pub fn compare(paths: &[PathBuf], tol: f64) -> Result<Vec<CompareRow>> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("compare needs at least one trace".into()));
    }
    paths
        .iter()
        .map(|p| Ok(summarize(&p.display().to_string(), &SolveTrace::read_csv(p)?, tol)))
        .collect()
}

pub fn format_table(rows: &[CompareRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>18}  {:>6}  {:>9}  {:>12}  {:>10}",
        "trace", "final_cost", "iters", "iters_tol", "wall_ms", "drop_1"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>18.10e}  {:>6}  {:>9}  {:>12.3}  {:>10.6}",
            r.label, r.final_cost, r.iterations, r.iterations_to_tol, r.wall_time_ms, r.first_iteration_drop
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const PENDULUM: &str = r#"
name = "p"
system = "pendulum"
horizon = 5
dt = 0.1
x0 = [0.0, 0.0]
goal = [1.0, 0.0]
initial_cov = 1e-3
w = { diag = [0.1, 0.1] }
r = 0.1
w_terminal = { full = [100.0, 0.0, 0.0, 100.0] }
solver = "sppdp"
prior_cov = 0.1
"#;

    #[test]
    fn parses_matrix_forms() {
        let c = ExperimentConfig::from_toml_str(PENDULUM, Path::new("p.toml")).unwrap();
        let inst = c.build_instance().unwrap();
        assert_eq!(inst.cost.terminal_weight[(1, 1)], 100.0);
        assert_eq!(inst.cost.state_weight[(0, 0)], 0.1);
        assert_eq!(inst.initial_covariance[(1, 1)], 1e-3);
        assert_eq!(c.rule_family().unwrap(), RuleFamily::Gh3);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = format!("{PENDULUM}max_iter = 3\n");
        match ExperimentConfig::from_toml_str(&text, Path::new("p.toml")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, text.lines().count());
                assert!(message.contains("max_iter"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn foreign_plant_parameter_is_rejected() {
        let text = format!("{PENDULUM}[plant]\ncart_mass = 1.0\n");
        let err = ExperimentConfig::from_toml_str(&text, Path::new("p.toml")).unwrap_err();
        assert!(err.to_string().contains("plant.cart_mass"), "{err}");
    }

    #[test]
    fn summary_of_short_trace() {
        let mut t = SolveTrace::default();
        for (i, c) in [10.0, 4.0, 2.0, 2.0].iter().enumerate() {
            t.push(
                crate::trace::TraceRecord {
                    iter: i,
                    total_cost: *c,
                    gamma: 0.0,
                    max_policy_cov_eig: 0.0,
                    time_ms: i as f64,
                },
                None,
            );
        }
        let row = summarize("x", &t, 1e-3);
        assert_eq!(row.iterations, 3);
        assert_eq!(row.iterations_to_tol, 2);
        assert_eq!(row.first_iteration_drop, 0.6);
        assert_eq!(row.wall_time_ms, 3.0);
    }
}
