//! Time-varying affine Gaussian policies
//! `u ~ N(û_t + k_t + K_t (x − x̂_t), Σ_t)` and their closed-loop rollouts.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{ensure_len, ensure_square, max_eigenvalue, min_eigenvalue, symmetrize};
use crate::models::{total_cost, ProblemInstance};
use crate::{lit, to_f64, Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGaussianPolicy<T: Real> {
    feedforward: Vec<DVector<T>>,
    feedback: Vec<DMatrix<T>>,
    covariance: Vec<DMatrix<T>>,
    nominal_states: Vec<DVector<T>>,
    nominal_actions: Vec<DVector<T>>,
}

/// A closed-loop trajectory: `T + 1` states, `T` actions and its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T: Real> {
    pub states: Vec<DVector<T>>,
    pub actions: Vec<DVector<T>>,
    pub cost: T,
}

impl<T: Real> AffineGaussianPolicy<T> {
    /// Builds a policy after checking shapes and that each `Σ_t` is
    /// symmetric positive semidefinite (it is symmetrized on entry).
    pub fn new(
        feedforward: Vec<DVector<T>>,
        feedback: Vec<DMatrix<T>>,
        covariance: Vec<DMatrix<T>>,
        nominal_states: Vec<DVector<T>>,
        nominal_actions: Vec<DVector<T>>,
    ) -> Result<Self> {
        let horizon = feedforward.len();
        if horizon == 0 {
            return Err(Error::InvalidArgument("policy horizon must be at least 1".into()));
        }
        for (what, len) in [
            ("policy feedback gains", feedback.len()),
            ("policy covariances", covariance.len()),
            ("policy nominal states", nominal_states.len()),
            ("policy nominal actions", nominal_actions.len()),
        ] {
            if len != horizon {
                return Err(Error::Dimension {
                    what,
                    expected: horizon,
                    found: len,
                });
            }
        }
        let nu = feedforward[0].len();
        let nx = nominal_states[0].len();
        let mut covariance = covariance;
        for t in 0..horizon {
            ensure_len(&feedforward[t], nu, "policy feedforward k_t")?;
            ensure_len(&nominal_states[t], nx, "policy nominal state")?;
            ensure_len(&nominal_actions[t], nu, "policy nominal action")?;
            if feedback[t].nrows() != nu || feedback[t].ncols() != nx {
                return Err(Error::Dimension {
                    what: "policy feedback gain K_t",
                    expected: nu * nx,
                    found: feedback[t].len(),
                });
            }
            ensure_square(&covariance[t], nu, "policy covariance")?;
            covariance[t] = symmetrize(&covariance[t]);
            let scale = max_eigenvalue(&covariance[t]).abs().max(T::one());
            if min_eigenvalue(&covariance[t]) < -lit::<T>(1e-12) * scale {
                return Err(Error::NotPositiveDefiniteAt {
                    what: "policy covariance",
                    t,
                });
            }
        }
        Ok(AffineGaussianPolicy {
            feedforward,
            feedback,
            covariance,
            nominal_states,
            nominal_actions,
        })
    }

    /// Zero-gain prior `N(u_t; 0, Σ)` with zero nominals.
    pub fn prior(horizon: usize, state_dim: usize, covariance: &DMatrix<T>) -> Result<Self> {
        let nu = covariance.nrows();
        Self::new(
            vec![DVector::zeros(nu); horizon],
            vec![DMatrix::zeros(nu, state_dim); horizon],
            vec![covariance.clone(); horizon],
            vec![DVector::zeros(state_dim); horizon],
            vec![DVector::zeros(nu); horizon],
        )
    }

    pub fn horizon(&self) -> usize {
        self.feedforward.len()
    }

    pub fn state_dim(&self) -> usize {
        self.nominal_states[0].len()
    }

    pub fn control_dim(&self) -> usize {
        self.feedforward[0].len()
    }

    pub fn feedforward(&self, t: usize) -> &DVector<T> {
        &self.feedforward[t]
    }

    pub fn feedback(&self, t: usize) -> &DMatrix<T> {
        &self.feedback[t]
    }

    pub fn covariance(&self, t: usize) -> &DMatrix<T> {
        &self.covariance[t]
    }

    pub fn nominal_state(&self, t: usize) -> &DVector<T> {
        &self.nominal_states[t]
    }

    pub fn nominal_action(&self, t: usize) -> &DVector<T> {
        &self.nominal_actions[t]
    }

    /// Offset of the action law in absolute coordinates, `û_t + k_t − K_t x̂_t`.
    pub fn absolute_feedforward(&self, t: usize) -> DVector<T> {
        &self.nominal_actions[t] + &self.feedforward[t] - &self.feedback[t] * &self.nominal_states[t]
    }

    /// `û_t + k_t + K_t (x − x̂_t)`.
    pub fn mean_action(&self, t: usize, x: &DVector<T>) -> DVector<T> {
        &self.nominal_actions[t] + &self.feedforward[t] + &self.feedback[t] * (x - &self.nominal_states[t])
    }

    /// Largest eigenvalue over all `Σ_t`.
    pub fn max_covariance_eigenvalue(&self) -> T {
        self.covariance
            .iter()
            .map(max_eigenvalue)
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }

    /// Same action law expressed about new nominals:
    /// `k' = k + K (x̂' − x̂) + (û − û')`.
    pub fn re_reference(&self, states: &[DVector<T>], actions: &[DVector<T>]) -> Result<Self> {
        let horizon = self.horizon();
        if states.len() < horizon || actions.len() < horizon {
            return Err(Error::Dimension {
                what: "re-reference nominals",
                expected: horizon,
                found: states.len().min(actions.len()),
            });
        }
        let mut out = self.clone();
        for t in 0..horizon {
            ensure_len(&states[t], self.state_dim(), "re-reference nominal state")?;
            ensure_len(&actions[t], self.control_dim(), "re-reference nominal action")?;
            out.feedforward[t] = &self.feedforward[t] + &self.feedback[t] * (&states[t] - &self.nominal_states[t])
                + (&self.nominal_actions[t] - &actions[t]);
            out.nominal_states[t] = states[t].clone();
            out.nominal_actions[t] = actions[t].clone();
        }
        Ok(out)
    }

    fn check_instance(&self, instance: &ProblemInstance<T>) -> Result<()> {
        if self.horizon() != instance.horizon() {
            return Err(Error::Dimension {
                what: "policy horizon",
                expected: instance.horizon(),
                found: self.horizon(),
            });
        }
        if self.state_dim() != instance.state_dim() {
            return Err(Error::Dimension {
                what: "policy state dimension",
                expected: instance.state_dim(),
                found: self.state_dim(),
            });
        }
        if self.control_dim() != instance.control_dim() {
            return Err(Error::Dimension {
                what: "policy control dimension",
                expected: instance.control_dim(),
                found: self.control_dim(),
            });
        }
        Ok(())
    }

    /// Deterministic closed-loop simulation from the initial mean using
    /// [`mean_action`](Self::mean_action).
    pub fn rollout_mean(&self, instance: &ProblemInstance<T>) -> Result<Rollout<T>> {
        self.check_instance(instance)?;
        self.simulate(instance, |t, x| self.mean_action(t, x))
    }

    /// `count` stochastic closed-loop rollouts from the initial mean, drawing
    /// `u_t ~ N(mean_action, Σ_t)` from a ChaCha8 stream seeded with `seed`.
    pub fn rollout_sampled(&self, instance: &ProblemInstance<T>, seed: u64, count: usize) -> Result<Vec<Rollout<T>>> {
        self.check_instance(instance)?;
        if count == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let roots: Vec<DMatrix<T>> = self.covariance.iter().map(psd_sqrt).collect();
        let nu = self.control_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let rollout = self.simulate(instance, |t, x| {
                let z = DVector::from_fn(nu, |_, _| lit::<T>(rng.sample::<f64, _>(StandardNormal)));
                self.mean_action(t, x) + &roots[t] * z
            })?;
            out.push(rollout);
        }
        Ok(out)
    }

    fn simulate(
        &self,
        instance: &ProblemInstance<T>,
        mut action: impl FnMut(usize, &DVector<T>) -> DVector<T>,
    ) -> Result<Rollout<T>> {
        let horizon = self.horizon();
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        states.push(instance.initial_mean.clone());
        for t in 0..horizon {
            let u = action(t, &states[t]);
            let next = instance.system.step_checked(&states[t], &u, t)?;
            actions.push(u);
            states.push(next);
        }
        let cost = total_cost(instance, &states, &actions)?;
        Ok(Rollout { states, actions, cost })
    }

    /// Flat text form: a `T n_x n_u` header, then five lines per step holding
    /// `k_t`, `K_t` (row-major), `Σ_t` (row-major), `x̂_t` and `û_t`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.horizon(), self.state_dim(), self.control_dim());
        let row = |s: &mut String, values: &mut dyn Iterator<Item = T>| {
            let line: Vec<String> = values.map(|v| format!("{:e}", to_f64(v))).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        };
        for t in 0..self.horizon() {
            row(&mut s, &mut self.feedforward[t].iter().copied());
            row(&mut s, &mut self.feedback[t].transpose().iter().copied());
            row(&mut s, &mut self.covariance[t].transpose().iter().copied());
            row(&mut s, &mut self.nominal_states[t].iter().copied());
            row(&mut s, &mut self.nominal_actions[t].iter().copied());
        }
        s
    }

    /// Parses [`to_text`](Self::to_text) output; `path` is used in error messages.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (hline, header) = lines.next().ok_or_else(|| err(1, "empty policy file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|w| w.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(hline, format!("bad header: {e}")))?;
        if dims.len() != 3 {
            return Err(err(hline, "header must be `T n_x n_u`".into()));
        }
        let (horizon, nx, nu) = (dims[0], dims[1], dims[2]);
        let mut read = |expected: usize| -> Result<Vec<T>> {
            let (no, line) = lines.next().ok_or_else(|| err(0, "unexpected end of policy file".into()))?;
            let values: Vec<T> = line
                .split_whitespace()
                .map(|w| w.parse::<f64>().map(lit::<T>))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(no, format!("bad number: {e}")))?;
            if values.len() != expected {
                return Err(err(no, format!("expected {expected} values, found {}", values.len())));
            }
            Ok(values)
        };
        let mut k = Vec::with_capacity(horizon);
        let mut gains = Vec::with_capacity(horizon);
        let mut covs = Vec::with_capacity(horizon);
        let mut xs = Vec::with_capacity(horizon);
        let mut us = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            k.push(DVector::from_vec(read(nu)?));
            gains.push(DMatrix::from_row_slice(nu, nx, &read(nu * nx)?));
            covs.push(DMatrix::from_row_slice(nu, nu, &read(nu * nu)?));
            xs.push(DVector::from_vec(read(nx)?));
            us.push(DVector::from_vec(read(nu)?));
        }
        if let Some((no, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(err(no, format!("trailing content `{}`", extra.trim())));
        }
        Self::new(k, gains, covs, xs, us)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

/// Square root `S` with `S Sᵀ = Σ` that tolerates singular `Σ`.
fn psd_sqrt<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return c.l();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|v| if v > T::zero() { v.sqrt() } else { T::zero() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}
