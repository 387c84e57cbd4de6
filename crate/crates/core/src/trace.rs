//! Per-iteration solver records and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// CSV header of a trace file.
pub const TRACE_HEADER: &str = "iter,total_cost,gamma,max_policy_cov_eig,time_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    /// Deterministic rollout cost of the policy after this iteration.
    pub total_cost: f64,
    /// Risk parameter `γ*` produced by this iteration (0 for solvers without one).
    pub gamma: f64,
    pub max_policy_cov_eig: f64,
    pub time_ms: f64,
}

/// Iteration history of one solve. Row 0 describes the initial policy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    pub records: Vec<TraceRecord>,
    /// Quadrature estimate of the expected total cost behind each `γ*`
    /// (aligned with `records`; `None` where no temperature update ran).
    pub expected_costs: Vec<Option<f64>>,
    pub converged: bool,
}

impl SolveTrace {
    pub fn push(&mut self, record: TraceRecord, expected_cost: Option<f64>) {
        self.records.push(record);
        self.expected_costs.push(expected_cost);
    }

    pub fn final_cost(&self) -> Option<f64> {
        self.records.last().map(|r| r.total_cost)
    }

    /// Number of iterations after the initial row.
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    /// CSV with 17 significant digits; `time_ms` is zeroed unless
    /// `wall_time` is set so that repeated runs produce identical files.
    pub fn to_csv(&self, wall_time: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{TRACE_HEADER}");
        for r in &self.records {
            let time = if wall_time { r.time_ms } else { 0.0 };
            let _ = writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.iter, r.total_cost, r.gamma, r.max_policy_cov_eig, time
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path, wall_time: bool) -> Result<()> {
        std::fs::write(path, self.to_csv(wall_time)).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h.trim() == TRACE_HEADER => {}
            Some((n, h)) => return Err(err(n, format!("expected header `{TRACE_HEADER}`, found `{h}`"))),
            None => return Err(err(1, "empty trace file".into())),
        }
        let mut trace = SolveTrace::default();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(err(no, format!("expected 5 fields, found {}", fields.len())));
            }
            let iter = fields[0]
                .parse::<usize>()
                .map_err(|e| err(no, format!("bad iteration index `{}`: {e}", fields[0])))?;
            let mut nums = [0.0; 4];
            for (slot, field) in nums.iter_mut().zip(&fields[1..]) {
                *slot = field
                    .parse::<f64>()
                    .map_err(|e| err(no, format!("bad number `{field}`: {e}")))?;
                if !slot.is_finite() {
                    return Err(err(no, format!("non-finite value `{field}`")));
                }
            }
            if let Some(prev) = trace.records.last() {
                if iter <= prev.iter {
                    return Err(err(no, format!("iteration index {iter} is not increasing")));
                }
            }
            trace.push(
                TraceRecord {
                    iter,
                    total_cost: nums[0],
                    gamma: nums[1],
                    max_policy_cov_eig: nums[2],
                    time_ms: nums[3],
                },
                None,
            );
        }
        if trace.records.is_empty() {
            return Err(err(1, "trace has no rows".into()));
        }
        Ok(trace)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

/// Relative change `|a − b| / max(|b|, tiny)`.
pub(crate) fn relative_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(f64::MIN_POSITIVE)
}

/// Stops when the relative cost change stays below `tol` for `window`
/// consecutive iterations.
#[derive(Debug, Clone)]
pub(crate) struct StallCounter {
    tol: f64,
    window: usize,
    run: usize,
}

impl StallCounter {
    pub(crate) fn new(tol: f64, window: usize) -> Self {
        StallCounter { tol, window, run: 0 }
    }

    pub(crate) fn observe(&mut self, new: f64, old: f64) -> bool {
        if relative_change(new, old) < self.tol {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= self.window
    }
}
