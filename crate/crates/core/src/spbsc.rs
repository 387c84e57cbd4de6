//! Sigma-point Bayesian smoothing control (SP-BSC).
//!
//! The cost enters as a pseudo-measurement `exp(−λ ĉ_t(ξ))`. Each iteration
//! filters the closed-loop trajectory forward, smooths it backward with an
//! RTS-style recursion over the cached sigma images, and reads the new
//! policy off the smoothed joint state-action Gaussians.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{cholesky_jittered, cholesky_solve, eigen_floor, psd_projection, symmetrize};
use crate::models::ProblemInstance;
use crate::policy::AffineGaussianPolicy;
use crate::quadrature::{fourier_hermite_fit_values, make_rule, moment_match_images, GaussianBelief, QuadraticModel, SigmaRule};
use crate::sppdp::{gamma_from_expected_cost, joint_belief, propagate_points, with_lambda_fallback, SolverConfig};
use crate::trace::{SolveTrace, StallCounter, TraceRecord};
use crate::{lit, to_f64, Error, Real, Result};

/// Eigenvalue floor applied to smoothed covariances before extraction.
pub const SMOOTHED_FLOOR: f64 = 1e-10;
/// Eigenvalue floor applied to extracted policy covariances.
pub const POLICY_FLOOR: f64 = 1e-12;

/// Mean and covariance without a cached factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Real> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
}

impl<T: Real> Moments<T> {
    pub fn leading(&self, n: usize) -> Moments<T> {
        Moments {
            mean: self.mean.rows(0, n).into_owned(),
            covariance: self.covariance.view((0, 0), (n, n)).into_owned(),
        }
    }
}

impl<T: Real> From<&GaussianBelief<T>> for Moments<T> {
    fn from(b: &GaussianBelief<T>) -> Self {
        Moments {
            mean: b.mean().clone(),
            covariance: b.covariance().clone(),
        }
    }
}

/// One filter step. For `t < T` the beliefs are over `ξ_t`; at `t = T`
/// they are over `x_T` and the sigma caches are empty.
#[derive(Debug, Clone)]
pub struct FilterStep<T: Real> {
    pub prediction: GaussianBelief<T>,
    /// PSD-projected cost surrogate fitted about `prediction`.
    pub cost: QuadraticModel<T>,
    pub filtered: GaussianBelief<T>,
    /// `f_t` at the sigma points of `filtered`.
    pub images: Option<DMatrix<T>>,
    /// `Σ^{s,−}_{ξx,t+1} = √Σ^f Σ_n w_n ε_n (f_{t,n} − μ^{f,−}_{x,t+1})ᵀ`.
    pub cross: Option<DMatrix<T>>,
}

#[derive(Debug, Clone)]
pub struct FilterBelief<T: Real> {
    /// `T + 1` steps.
    pub steps: Vec<FilterStep<T>>,
}

#[derive(Debug, Clone)]
pub struct SmoothedBelief<T: Real> {
    /// Smoothed `ξ_t`, `t = 0…T−1`.
    pub stages: Vec<Moments<T>>,
    pub terminal: Moments<T>,
}

/// Prior over `ξ_0` induced by the policy on `N(μ_x,0, Σ_xx,0)`.
pub fn filter_init<T: Real>(instance: &ProblemInstance<T>, policy: &AffineGaussianPolicy<T>) -> Result<GaussianBelief<T>> {
    joint_belief(policy, 0, &instance.initial_mean, &instance.initial_covariance)
}

/// Unscented prediction of `x_{t+1}` from the filtered `ξ_t`.
///
/// Returns the predicted state moments, the sigma images and the cross
/// covariance `Σ_{ξx}`.
pub fn filter_predict_state<T: Real>(
    instance: &ProblemInstance<T>,
    filtered: &GaussianBelief<T>,
    rule: &SigmaRule<T>,
    t: usize,
) -> Result<(GaussianBelief<T>, DMatrix<T>, DMatrix<T>)> {
    let images = propagate_points(instance, filtered, rule, t)?;
    let mm = moment_match_images(rule, filtered, images)?;
    let state = GaussianBelief::new(mm.mean, mm.covariance)?;
    Ok((state, mm.images, mm.cross_covariance))
}

/// Prediction over `ξ_{t+1}`: unscented state prediction, then the
/// policy's action blocks on the predicted state.
pub fn filter_predict<T: Real>(
    instance: &ProblemInstance<T>,
    policy: &AffineGaussianPolicy<T>,
    filtered: &GaussianBelief<T>,
    rule: &SigmaRule<T>,
    t: usize,
) -> Result<GaussianBelief<T>> {
    let (state, _, _) = filter_predict_state(instance, filtered, rule, t)?;
    joint_belief(policy, t + 1, state.mean(), state.covariance())
}

/// Fourier-Hermite surrogate of `c_t` (or `c_T` when the belief is over
/// the state only) about `prediction`, with the Hessian projected onto
/// the PSD cone.
pub fn cost_quadratize<T: Real>(
    instance: &ProblemInstance<T>,
    prediction: &GaussianBelief<T>,
    rule: &SigmaRule<T>,
) -> Result<QuadraticModel<T>> {
    let terminal = prediction.dimension() == instance.state_dim();
    let pts = prediction.sigma_points(rule)?;
    let values: Vec<T> = pts
        .column_iter()
        .map(|c| {
            let v = c.into_owned();
            if terminal {
                instance.cost.terminal_cost(&v)
            } else {
                instance.cost.stage_cost_joint(&v)
            }
        })
        .collect();
    let mut model = fourier_hermite_fit_values(rule, prediction, &values)?;
    model.hessian = psd_projection(&model.hessian);
    Ok(model)
}

/// Conditions `prediction` on the pseudo-measurement `exp(−λ ĉ)`.
///
/// Evaluated in whitened information form: with `Σ⁻ = L Lᵀ` and
/// `S = I + λ Lᵀ Ĉ_ξξ L`, `Σ^f = L S⁻¹ Lᵀ` and
/// `μ^f = μ⁻ − λ Σ^f ∇ĉ(μ⁻)`.
pub fn filter_update<T: Real>(
    prediction: &GaussianBelief<T>,
    cost: &QuadraticModel<T>,
    lambda: T,
    t: usize,
) -> Result<GaussianBelief<T>> {
    let l = prediction.cholesky();
    let n = l.nrows();
    let s = DMatrix::identity(n, n) + l.transpose() * &cost.hessian * l * lambda;
    let ls = cholesky_jittered(&symmetrize(&s), "filter information matrix").map_err(|_| Error::NotPositiveDefiniteAt {
        what: "filter information matrix",
        t,
    })?;
    let w = ls
        .solve_lower_triangular(&l.transpose())
        .expect("information factor is nonsingular");
    let cov = symmetrize(&(w.transpose() * &w));
    let grad = &cost.gradient + &cost.hessian * (prediction.mean() - &cost.reference);
    let mean = prediction.mean() - &cov * grad * lambda;
    GaussianBelief::new(mean, cov)
}

/// Full forward filter over `t = 0…T` under `policy` and temperature `λ`.
pub fn filter_pass<T: Real>(
    instance: &ProblemInstance<T>,
    policy: &AffineGaussianPolicy<T>,
    rule: &SigmaRule<T>,
    lambda: T,
) -> Result<FilterBelief<T>> {
    rule.check_dimension(instance.system.joint_dim())?;
    let state_rule = make_rule::<T>(rule.family(), instance.state_dim())?;
    let horizon = instance.horizon();
    let mut steps = Vec::with_capacity(horizon + 1);
    let mut prediction = filter_init(instance, policy)?;
    for t in 0..horizon {
        let cost = cost_quadratize(instance, &prediction, rule)?;
        let filtered = filter_update(&prediction, &cost, lambda, t)?;
        let (state, images, cross) = filter_predict_state(instance, &filtered, rule, t)?;
        let next = if t + 1 < horizon {
            joint_belief(policy, t + 1, state.mean(), state.covariance())?
        } else {
            state
        };
        steps.push(FilterStep {
            prediction,
            cost,
            filtered,
            images: Some(images),
            cross: Some(cross),
        });
        prediction = next;
    }
    let cost = cost_quadratize(instance, &prediction, &state_rule)?;
    let filtered = filter_update(&prediction, &cost, lambda, horizon)?;
    steps.push(FilterStep {
        prediction,
        cost,
        filtered,
        images: None,
        cross: None,
    });
    Ok(FilterBelief { steps })
}

/// Backward smoothing recursion from the filtered terminal state.
pub fn smooth_pass<T: Real>(filter: &FilterBelief<T>, state_dim: usize) -> Result<SmoothedBelief<T>> {
    let horizon = filter.steps.len() - 1;
    let terminal = Moments::from(&filter.steps[horizon].filtered);
    let mut next = terminal.clone();
    let mut stages = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let step = &filter.steps[t];
        let cross = step.cross.as_ref().ok_or(Error::InvalidArgument(format!(
            "filter step {t} carries no cross covariance"
        )))?;
        let predicted = filter.steps[t + 1].prediction.leading_marginal(state_dim);
        // S_t = Σ_{ξx} Σ⁻¹_xx,t+1, solved against the cached factor
        let gain = cholesky_solve(predicted.cholesky(), &cross.transpose()).transpose();
        let mean = step.filtered.mean() + &gain * (&next.mean - predicted.mean());
        let cov = step.filtered.covariance() + &gain * (&next.covariance - predicted.covariance()) * gain.transpose();
        let smoothed = Moments {
            mean,
            covariance: symmetrize(&cov),
        };
        next = smoothed.leading(state_dim);
        stages.push(smoothed);
    }
    stages.reverse();
    Ok(SmoothedBelief { stages, terminal })
}

/// Conditional `u | x` of each smoothed joint, as a policy about the
/// smoothed means.
pub fn extract_policy<T: Real>(smoothed: &SmoothedBelief<T>, state_dim: usize) -> Result<AffineGaussianPolicy<T>> {
    let nx = state_dim;
    let horizon = smoothed.stages.len();
    let mut ks = Vec::with_capacity(horizon);
    let mut gains = Vec::with_capacity(horizon);
    let mut covs = Vec::with_capacity(horizon);
    let mut xs = Vec::with_capacity(horizon);
    let mut us = Vec::with_capacity(horizon);
    for (t, stage) in smoothed.stages.iter().enumerate() {
        let n = stage.mean.len();
        let nu = n - nx;
        let cov = eigen_floor(&stage.covariance, lit(SMOOTHED_FLOOR));
        let sxx = cov.view((0, 0), (nx, nx)).into_owned();
        let sux = cov.view((nx, 0), (nu, nx)).into_owned();
        let suu = cov.view((nx, nx), (nu, nu)).into_owned();
        let lxx = cholesky_jittered(&sxx, "smoothed state covariance").map_err(|_| Error::NotPositiveDefiniteAt {
            what: "smoothed state covariance",
            t,
        })?;
        let gain = cholesky_solve(&lxx, &sux.transpose()).transpose();
        let mean_x = stage.mean.rows(0, nx).into_owned();
        let mean_u = stage.mean.rows(nx, nu).into_owned();
        let conditional = eigen_floor(&(suu - &gain * sux.transpose()), lit(POLICY_FLOOR));
        ks.push(&mean_u - &gain * &mean_x);
        gains.push(gain);
        covs.push(conditional);
        xs.push(mean_x);
        us.push(mean_u);
    }
    let absolute = AffineGaussianPolicy::new(
        ks,
        gains,
        covs,
        vec![DVector::zeros(nx); horizon],
        vec![DVector::zeros(smoothed.stages[0].mean.len() - nx); horizon],
    )?;
    absolute.re_reference(&xs, &us)
}

/// `(γ*, E)` where `E = Σ_t E_{N(μ^s_t, Σ^s_t)}[ĉ_t]`, `t = 0…T`.
pub fn temperature_update<T: Real>(smoothed: &SmoothedBelief<T>, filter: &FilterBelief<T>) -> (f64, f64) {
    let horizon = smoothed.stages.len();
    let mut expected = T::zero();
    for (stage, step) in smoothed.stages.iter().zip(&filter.steps) {
        expected += step.cost.expectation(&stage.mean, &stage.covariance);
    }
    expected += filter.steps[horizon]
        .cost
        .expectation(&smoothed.terminal.mean, &smoothed.terminal.covariance);
    let expected = to_f64(expected);
    if expected <= 0.0 {
        log::warn!("surrogate expected cost {expected:e} is not positive");
    }
    (gamma_from_expected_cost(horizon, expected), expected)
}

/// SP-BSC from the prior `initial`.
pub fn solve<T: Real>(
    instance: &ProblemInstance<T>,
    config: &SolverConfig,
    initial: &AffineGaussianPolicy<T>,
) -> Result<(AffineGaussianPolicy<T>, SolveTrace)> {
    if !(config.lambda_init > 0.0) {
        return Err(Error::InvalidArgument("lambda_init must be positive".into()));
    }
    let start = Instant::now();
    let rule = make_rule::<T>(config.rule, instance.system.joint_dim())?;
    let nx = instance.state_dim();
    let mut policy = initial.clone();
    let mut cost = to_f64(policy.rollout_mean(instance)?.cost);
    let mut trace = SolveTrace::default();
    trace.push(
        TraceRecord {
            iter: 0,
            total_cost: cost,
            gamma: config.lambda_init,
            max_policy_cov_eig: to_f64(policy.max_covariance_eigenvalue()),
            time_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        None,
    );
    let mut lambda = config.lambda_init;
    let mut stall = StallCounter::new(config.tol, config.stall_window.max(1));
    for iter in 1..=config.max_iters {
        let tick = Instant::now();
        let step = (|| -> Result<_> {
            let (filter, used) = with_lambda_fallback(lambda, iter, |l: T| filter_pass(instance, &policy, &rule, l))?;
            let smoothed = smooth_pass(&filter, nx)?;
            let next_policy = extract_policy(&smoothed, nx)?;
            let (gamma, expected) = temperature_update(&smoothed, &filter);
            let rollout = next_policy.rollout_mean(instance)?;
            Ok((next_policy, gamma, expected, used, rollout.cost))
        })();
        let (next_policy, gamma, expected, used, new_cost) = step.map_err(|e| e.at_iteration(iter))?;
        policy = next_policy;
        lambda = if config.temperature_update { gamma } else { used };
        let old = cost;
        cost = to_f64(new_cost);
        trace.push(
            TraceRecord {
                iter,
                total_cost: cost,
                gamma,
                max_policy_cov_eig: to_f64(policy.max_covariance_eigenvalue()),
                time_ms: tick.elapsed().as_secs_f64() * 1e3,
            },
            Some(expected),
        );
        log::info!("iter {iter}: cost {cost:.9e} gamma {gamma:.6e} E {expected:.6e}");
        if stall.observe(cost, old) {
            trace.converged = true;
            break;
        }
    }
    Ok((policy, trace))
}
