//! Differential dynamic programming and its sigma-point variant SP-DP.
//!
//! Both solvers share the gain/value recursion and the regularized,
//! line-searched outer loop; they differ only in how the state-action
//! value expansion is obtained at each step. DDP differentiates the
//! plant (Gauss-Newton by default, full second order on request). SP-DP
//! fits a Fourier-Hermite surrogate about the nominal under a fixed,
//! small Gaussian measure.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::linalg::{concat, symmetrize};
use crate::models::{finite_difference_jacobian, ProblemInstance};
use crate::policy::{AffineGaussianPolicy, Rollout};
use crate::quadrature::{fourier_hermite_fit_values, GaussianBelief, QuadraticModel, SigmaRule};
use crate::trace::{SolveTrace, StallCounter, TraceRecord};
use crate::{lit, to_f64, Error, Real, Result};

/// Largest regularization tried before giving up.
pub const MU_MAX: f64 = 1e10;
/// Smallest nonzero regularization.
pub const MU_MIN: f64 = 1e-6;
/// Backtracking steps `α = 1, ½, …, 2⁻ᴺ`.
pub const LINE_SEARCH_STEPS: i32 = 10;

/// Value-function expansions `V̂_t`, `t = 0…T`, each about the nominal state.
pub type ValueExpansion<T> = Vec<QuadraticModel<T>>;

/// State-action value expansion about `(x̂_t, û_t)`, partitioned by `n_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct QExpansion<T: Real> {
    pub model: QuadraticModel<T>,
    pub state_dim: usize,
}

impl<T: Real> QExpansion<T> {
    fn nu(&self) -> usize {
        self.model.dimension() - self.state_dim
    }

    pub fn q0(&self) -> T {
        self.model.constant
    }

    pub fn q_x(&self) -> DVector<T> {
        self.model.gradient.rows(0, self.state_dim).into_owned()
    }

    pub fn q_u(&self) -> DVector<T> {
        self.model.gradient.rows(self.state_dim, self.nu()).into_owned()
    }

    pub fn q_xx(&self) -> DMatrix<T> {
        let n = self.state_dim;
        self.model.hessian.view((0, 0), (n, n)).into_owned()
    }

    pub fn q_ux(&self) -> DMatrix<T> {
        let n = self.state_dim;
        self.model.hessian.view((n, 0), (self.nu(), n)).into_owned()
    }

    pub fn q_uu(&self) -> DMatrix<T> {
        let n = self.state_dim;
        let m = self.nu();
        self.model.hessian.view((n, n), (m, m)).into_owned()
    }
}

/// Output of one backward sweep.
#[derive(Debug, Clone)]
pub struct Backward<T: Real> {
    pub feedforward: Vec<DVector<T>>,
    pub feedback: Vec<DMatrix<T>>,
    pub values: ValueExpansion<T>,
    pub q: Vec<QExpansion<T>>,
    /// Coefficients `(Σ kᵀQ_u, Σ kᵀQ_uu k)` of the predicted change
    /// `α d₁ + ½ α² d₂`.
    pub expected_change: (T, T),
}

impl<T: Real> Backward<T> {
    pub fn predicted_change(&self, alpha: T) -> T {
        let (d1, d2) = self.expected_change;
        alpha * d1 + alpha * alpha * d2 * lit::<T>(0.5)
    }
}

/// How the per-step Q expansion is formed.
#[derive(Debug, Clone)]
pub enum Expansion<T: Real> {
    /// Analytic cost derivatives plus plant Jacobians; optional dynamics
    /// Hessians contracted with `V_x`.
    Derivatives { second_order: bool },
    /// Fourier-Hermite fit under `N((x̂_t, û_t), covariance)`; the terminal
    /// fit uses the leading state block.
    SigmaPoint { rule: SigmaRule<T>, covariance: DMatrix<T> },
}

/// Options shared by DDP and SP-DP.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpOptions {
    pub max_iters: usize,
    /// Relative cost-change threshold of the stall test.
    pub tol: f64,
    /// Consecutive stalled iterations needed to stop.
    pub stall_window: usize,
}

impl Default for DdpOptions {
    fn default() -> Self {
        DdpOptions {
            max_iters: 200,
            tol: 1e-6,
            stall_window: 3,
        }
    }
}

/// Plant Jacobians of the discrete step at `(x, u)`: analytic when
/// available, central differences otherwise.
pub fn step_jacobians<T: Real>(instance: &ProblemInstance<T>, x: &DVector<T>, u: &DVector<T>) -> (DMatrix<T>, DMatrix<T>) {
    instance
        .system
        .step_jacobians_analytic(x, u)
        .unwrap_or_else(|| instance.system.step_jacobians_fd(x, u))
}

/// `Σ_i v_i ∇²f_i(ξ)` by central differences of the step Jacobian.
fn contracted_dynamics_hessian<T: Real>(instance: &ProblemInstance<T>, xi: &DVector<T>, v: &DVector<T>) -> DMatrix<T> {
    let nx = instance.state_dim();
    let nu = instance.control_dim();
    let n = nx + nu;
    let jac = |z: &DVector<T>| {
        let x = z.rows(0, nx).into_owned();
        let u = z.rows(nx, nu).into_owned();
        let (a, b) = step_jacobians(instance, &x, &u);
        let mut j = DMatrix::zeros(nx, n);
        j.view_mut((0, 0), (nx, nx)).copy_from(&a);
        j.view_mut((0, nx), (nx, nu)).copy_from(&b);
        j.transpose() * v
    };
    let h = finite_difference_jacobian(jac, xi, lit(1e-5));
    debug_assert_eq!(h.nrows(), n);
    symmetrize(&h)
}

/// Exact second-order expansion of `c_t + V̂_{t+1}∘f` with linearized (or
/// second-order) dynamics about the nominal.
fn derivative_q<T: Real>(
    instance: &ProblemInstance<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    next: &QuadraticModel<T>,
    next_state: &DVector<T>,
    second_order: bool,
) -> QExpansion<T> {
    let nx = instance.state_dim();
    let nu = instance.control_dim();
    let (a, b) = step_jacobians(instance, x, u);
    let mut f = DMatrix::zeros(nx, nx + nu);
    f.view_mut((0, 0), (nx, nx)).copy_from(&a);
    f.view_mut((0, nx), (nx, nu)).copy_from(&b);
    let mut model = instance.cost.stage_expansion(x, u);
    // V̂_{t+1} is expanded about x̂_{t+1}; evaluate it at the actual image
    let v = next.recentered(next_state.clone());
    model.constant += v.constant;
    model.gradient += f.transpose() * &v.gradient;
    let mut hess = &model.hessian + f.transpose() * &v.hessian * &f;
    if second_order {
        hess += contracted_dynamics_hessian(instance, &concat(x, u), &v.gradient);
    }
    model.hessian = symmetrize(&hess);
    QExpansion { model, state_dim: nx }
}

/// Gains from a regularized `Q_uu + μI` and the matching value expansion.
///
/// The value update uses the unregularized blocks so that it stays
/// consistent with the gains actually applied.
pub fn gains_and_value<T: Real>(
    q: &QExpansion<T>,
    mu: T,
    t: usize,
) -> Result<(DVector<T>, DMatrix<T>, QuadraticModel<T>)> {
    let nx = q.state_dim;
    let quu = q.q_uu();
    let qux = q.q_ux();
    let qu = q.q_u();
    let mut reg = quu.clone();
    for i in 0..reg.nrows() {
        reg[(i, i)] += mu;
    }
    let chol = Cholesky::new(symmetrize(&reg)).ok_or(Error::NotPositiveDefiniteAt {
        what: "regularized Q_uu",
        t,
    })?;
    let k = -chol.solve(&qu);
    let gain = -chol.solve(&qux);
    let half = lit::<T>(0.5);
    let quu_k = &quu * &k;
    let value = QuadraticModel {
        reference: q.model.reference.rows(0, nx).into_owned(),
        constant: q.q0() + k.dot(&qu) + k.dot(&quu_k) * half,
        gradient: q.q_x() + gain.transpose() * (&quu_k + &qu) + qux.transpose() * &k,
        hessian: symmetrize(&(q.q_xx() + gain.transpose() * &quu * &gain + gain.transpose() * &qux + qux.transpose() * &gain)),
    };
    Ok((k, gain, value))
}

fn backward_with<T: Real>(
    instance: &ProblemInstance<T>,
    mu: T,
    mut expand: impl FnMut(usize, &QuadraticModel<T>) -> Result<QExpansion<T>>,
    terminal: QuadraticModel<T>,
) -> Result<Backward<T>> {
    let horizon = instance.horizon();
    let mut values = vec![terminal];
    let mut feedforward = Vec::with_capacity(horizon);
    let mut feedback = Vec::with_capacity(horizon);
    let mut qs = Vec::with_capacity(horizon);
    let (mut d1, mut d2) = (T::zero(), T::zero());
    for t in (0..horizon).rev() {
        let q = expand(t, values.last().expect("terminal value present"))?;
        let (k, gain, value) = gains_and_value(&q, mu, t)?;
        d1 += k.dot(&q.q_u());
        d2 += k.dot(&(q.q_uu() * &k));
        feedforward.push(k);
        feedback.push(gain);
        values.push(value);
        qs.push(q);
    }
    feedforward.reverse();
    feedback.reverse();
    values.reverse();
    qs.reverse();
    Ok(Backward {
        feedforward,
        feedback,
        values,
        q: qs,
        expected_change: (d1, d2),
    })
}

/// DDP backward sweep about a dynamically feasible nominal.
pub fn ddp_backward<T: Real>(instance: &ProblemInstance<T>, nominal: &Rollout<T>, mu: T, second_order: bool) -> Result<Backward<T>> {
    let horizon = instance.horizon();
    let terminal = instance.cost.terminal_expansion(&nominal.states[horizon]);
    backward_with(
        instance,
        mu,
        |t, next| {
            Ok(derivative_q(
                instance,
                &nominal.states[t],
                &nominal.actions[t],
                next,
                &nominal.states[t + 1],
                second_order,
            ))
        },
        terminal,
    )
}

/// SP-DP backward sweep: Fourier-Hermite fits of `c_T` and of
/// `c_t + V̂_{t+1}∘f_t` under a fixed Gaussian about the nominal.
pub fn spdp_backward<T: Real>(
    instance: &ProblemInstance<T>,
    nominal: &Rollout<T>,
    covariance: &DMatrix<T>,
    rule: &SigmaRule<T>,
    mu: T,
) -> Result<Backward<T>> {
    let horizon = instance.horizon();
    let nx = instance.state_dim();
    let n = instance.system.joint_dim();
    if covariance.nrows() != n || covariance.ncols() != n {
        return Err(Error::Dimension {
            what: "SP-DP measure covariance",
            expected: n,
            found: covariance.nrows(),
        });
    }
    let state_rule = crate::quadrature::make_rule::<T>(rule.family(), nx)?;
    let state_cov = covariance.view((0, 0), (nx, nx)).into_owned();
    let terminal_belief = GaussianBelief::new(nominal.states[horizon].clone(), state_cov)?;
    let terminal_values: Vec<T> = terminal_belief
        .sigma_points(&state_rule)?
        .column_iter()
        .map(|c| instance.cost.terminal_cost(&c.into_owned()))
        .collect();
    let terminal = fourier_hermite_fit_values(&state_rule, &terminal_belief, &terminal_values)?;
    backward_with(
        instance,
        mu,
        |t, next| {
            let belief = GaussianBelief::new(concat(&nominal.states[t], &nominal.actions[t]), covariance.clone())?;
            let mut values = Vec::with_capacity(rule.len());
            for (j, c) in belief.sigma_points(rule)?.column_iter().enumerate() {
                let xi = c.into_owned();
                let image = instance.system.step_joint(&xi);
                if !crate::linalg::all_finite(&image) {
                    log::debug!("SP-DP sigma point {j} blew up at t={t}");
                    return Err(Error::Blowup { t });
                }
                values.push(instance.cost.stage_cost_joint(&xi) + next.evaluate(&image));
            }
            let model = fourier_hermite_fit_values(rule, &belief, &values)?;
            Ok(QExpansion { model, state_dim: nx })
        },
        terminal,
    )
}

/// Closed-loop rollout of `u = û + α k + K (x − x̂)` from the initial mean.
pub fn ddp_forward<T: Real>(
    instance: &ProblemInstance<T>,
    nominal: &Rollout<T>,
    feedforward: &[DVector<T>],
    feedback: &[DMatrix<T>],
    alpha: T,
) -> Result<Rollout<T>> {
    let horizon = instance.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    states.push(instance.initial_mean.clone());
    for t in 0..horizon {
        let u = &nominal.actions[t] + &feedforward[t] * alpha + &feedback[t] * (&states[t] - &nominal.states[t]);
        let next = instance.system.step_checked(&states[t], &u, t)?;
        actions.push(u);
        states.push(next);
    }
    let cost = crate::models::total_cost(instance, &states, &actions)?;
    Ok(Rollout { states, actions, cost })
}

/// Deterministic policy `u = û_t + K_t (x − x̂_t)` about a trajectory.
fn deterministic_policy<T: Real>(nominal: &Rollout<T>, feedback: &[DMatrix<T>]) -> Result<AffineGaussianPolicy<T>> {
    let horizon = nominal.actions.len();
    let nu = nominal.actions[0].len();
    AffineGaussianPolicy::new(
        vec![DVector::zeros(nu); horizon],
        feedback.to_vec(),
        vec![DMatrix::zeros(nu, nu); horizon],
        nominal.states[..horizon].to_vec(),
        nominal.actions.clone(),
    )
}

fn raise_mu(mu: f64) -> f64 {
    (mu * 10.0).max(MU_MIN)
}

fn lower_mu(mu: f64) -> f64 {
    let m = mu * 0.5;
    if m < MU_MIN {
        0.0
    } else {
        m
    }
}

/// Outer DDP loop with Levenberg-Marquardt regularization and backtracking.
///
/// The nominal starts as the mean rollout of `initial`. The returned
/// policy is deterministic (zero covariance) about the final trajectory.
pub fn solve_with<T: Real>(
    instance: &ProblemInstance<T>,
    options: &DdpOptions,
    expansion: &Expansion<T>,
    initial: &AffineGaussianPolicy<T>,
) -> Result<(AffineGaussianPolicy<T>, SolveTrace)> {
    let start = Instant::now();
    let mut nominal = initial.rollout_mean(instance)?;
    let mut trace = SolveTrace::default();
    trace.push(
        TraceRecord {
            iter: 0,
            total_cost: to_f64(nominal.cost),
            gamma: 0.0,
            max_policy_cov_eig: 0.0,
            time_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        None,
    );
    let mut feedback: Vec<DMatrix<T>> = vec![DMatrix::zeros(instance.control_dim(), instance.state_dim()); instance.horizon()];
    let mut mu = 0.0f64;
    let mut stall = StallCounter::new(options.tol, options.stall_window.max(1));
    for iter in 1..=options.max_iters {
        let tick = Instant::now();
        let mut accepted: Option<(Rollout<T>, Backward<T>)> = None;
        let mut stop = false;
        while accepted.is_none() && !stop {
            let pass = match expansion {
                Expansion::Derivatives { second_order } => ddp_backward(instance, &nominal, lit(mu), *second_order),
                Expansion::SigmaPoint { rule, covariance } => spdp_backward(instance, &nominal, covariance, rule, lit(mu)),
            };
            let pass = match pass {
                Ok(p) => p,
                Err(Error::NotPositiveDefiniteAt { t, .. }) => {
                    mu = raise_mu(mu);
                    if mu > MU_MAX {
                        return Err(Error::RegularizationExhausted { t, mu }.at_iteration(iter));
                    }
                    continue;
                }
                Err(e) => return Err(e.at_iteration(iter)),
            };
            let predicted = to_f64(pass.predicted_change(T::one()));
            if -predicted <= 1e-13 * to_f64(nominal.cost).abs().max(f64::MIN_POSITIVE) {
                break;
            }
            let mut alpha = 1.0f64;
            for _ in 0..=LINE_SEARCH_STEPS {
                match ddp_forward(instance, &nominal, &pass.feedforward, &pass.feedback, lit(alpha)) {
                    Ok(candidate) if candidate.cost < nominal.cost => {
                        accepted = Some((candidate, pass));
                        break;
                    }
                    Ok(_) | Err(Error::Blowup { .. }) => {}
                    Err(e) => return Err(e.at_iteration(iter)),
                }
                alpha *= 0.5;
            }
            if accepted.is_none() {
                mu = raise_mu(mu);
                if mu > MU_MAX {
                    log::debug!("line search exhausted at iteration {iter}; treating as converged");
                    stop = true;
                }
            }
        }
        let Some((candidate, pass)) = accepted else {
            trace.converged = true;
            break;
        };
        mu = lower_mu(mu);
        let old = to_f64(nominal.cost);
        nominal = candidate;
        feedback = pass.feedback;
        let cost = to_f64(nominal.cost);
        trace.push(
            TraceRecord {
                iter,
                total_cost: cost,
                gamma: 0.0,
                max_policy_cov_eig: 0.0,
                time_ms: tick.elapsed().as_secs_f64() * 1e3,
            },
            None,
        );
        log::info!("iter {iter}: cost {cost:.9e} mu {mu:e}");
        if stall.observe(cost, old) {
            trace.converged = true;
            break;
        }
    }
    Ok((deterministic_policy(&nominal, &feedback)?, trace))
}

/// Classical DDP from the mean rollout of `initial`.
pub fn solve_ddp<T: Real>(
    instance: &ProblemInstance<T>,
    options: &DdpOptions,
    second_order: bool,
    initial: &AffineGaussianPolicy<T>,
) -> Result<(AffineGaussianPolicy<T>, SolveTrace)> {
    solve_with(instance, options, &Expansion::Derivatives { second_order }, initial)
}

/// SP-DP with the fixed measure `N(nominal, covariance)`.
pub fn solve_spdp<T: Real>(
    instance: &ProblemInstance<T>,
    options: &DdpOptions,
    rule: SigmaRule<T>,
    covariance: DMatrix<T>,
    initial: &AffineGaussianPolicy<T>,
) -> Result<(AffineGaussianPolicy<T>, SolveTrace)> {
    solve_with(instance, options, &Expansion::SigmaPoint { rule, covariance }, initial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Pendulum, QuadraticCost, SystemSpec};
    use crate::quadrature::{make_rule, RuleFamily};

    fn pendulum() -> ProblemInstance<f64> {
        let sys = SystemSpec::pendulum(Pendulum::default(), 0.1, 50).unwrap();
        let cost = QuadraticCost::new(
            DVector::from_row_slice(&[std::f64::consts::FRAC_PI_2, 0.0]),
            DMatrix::identity(2, 2) * 0.1,
            DMatrix::identity(1, 1) * 0.1,
            DMatrix::identity(2, 2) * 100.0,
        )
        .unwrap();
        ProblemInstance::new(sys, cost, DVector::zeros(2), DMatrix::identity(2, 2) * 1e-3).unwrap()
    }

    fn zero_policy(inst: &ProblemInstance<f64>) -> AffineGaussianPolicy<f64> {
        AffineGaussianPolicy::prior(inst.horizon(), inst.state_dim(), &(DMatrix::identity(1, 1) * 0.1)).unwrap()
    }

    #[test]
    fn zero_step_reproduces_nominal() {
        let inst = pendulum();
        let nominal = zero_policy(&inst).rollout_mean(&inst).unwrap();
        let pass = ddp_backward(&inst, &nominal, 0.0, false).unwrap();
        let same = ddp_forward(&inst, &nominal, &pass.feedforward, &pass.feedback, 0.0).unwrap();
        assert_eq!(same, nominal);
    }

    #[test]
    fn terminal_value_hessian_is_twice_terminal_weight() {
        let inst = pendulum();
        let nominal = zero_policy(&inst).rollout_mean(&inst).unwrap();
        let pass = ddp_backward(&inst, &nominal, 0.0, false).unwrap();
        assert_eq!(pass.values[50].hessian, &inst.cost.terminal_weight * 2.0);
    }

    #[test]
    fn regularization_schedule() {
        assert_eq!(raise_mu(0.0), MU_MIN);
        assert_eq!(raise_mu(1e-3), 1e-2);
        assert_eq!(lower_mu(1e-3), 5e-4);
        assert_eq!(lower_mu(1.5e-6), 0.0);
    }

    #[test]
    fn pendulum_cost_decreases_monotonically() {
        let inst = pendulum();
        let opts = DdpOptions {
            max_iters: 30,
            ..Default::default()
        };
        let (_, trace) = solve_ddp(&inst, &opts, false, &zero_policy(&inst)).unwrap();
        for w in trace.records.windows(2) {
            assert!(w[1].total_cost < w[0].total_cost);
        }
    }

    #[test]
    fn second_order_flag_runs() {
        let inst = pendulum();
        let opts = DdpOptions {
            max_iters: 5,
            ..Default::default()
        };
        let (policy, trace) = solve_ddp(&inst, &opts, true, &zero_policy(&inst)).unwrap();
        assert!(trace.final_cost().unwrap() < trace.records[0].total_cost);
        assert_eq!(policy.max_covariance_eigenvalue(), 0.0);
    }

    #[test]
    fn spdp_matches_ddp_expansion_on_linearized_model_for_small_measure() {
        let inst = pendulum();
        let nominal = zero_policy(&inst).rollout_mean(&inst).unwrap();
        let rule = make_rule(RuleFamily::Gh3, 3).unwrap();
        let a = ddp_backward(&inst, &nominal, 0.0, true).unwrap();
        let b = spdp_backward(&inst, &nominal, &(DMatrix::identity(3, 3) * 1e-6), &rule, 0.0).unwrap();
        let scale = a.feedback[0].abs().max().max(1.0);
        assert!((&a.feedback[0] - &b.feedback[0]).abs().max() < 1e-3 * scale);
    }
}
