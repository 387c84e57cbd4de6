//! Sigma-point probabilistic dynamic programming (SP-PDP).
//!
//! Each iteration runs a Fourier-Hermite backward pass about the current
//! closed-loop belief, replaces the policy with the regularized
//! probabilistic update, propagates the new closed-loop belief forward with
//! the unscented transform and sets the next temperature from the
//! quadrature estimate of the expected cost.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::ddp::QExpansion;
use crate::linalg::{all_finite, block_symmetric, cholesky_jittered, concat, log_det_from_cholesky, symmetrize};
use crate::models::ProblemInstance;
use crate::policy::AffineGaussianPolicy;
use crate::quadrature::{
    fourier_hermite_fit_values, make_rule, moment_match_images, GaussianBelief, QuadraticModel, RuleFamily, SigmaRule,
};
use crate::trace::{SolveTrace, StallCounter, TraceRecord};
use crate::{lit, to_f64, Error, Real, Result};

/// Bounds applied to `γ*`.
pub const GAMMA_MIN: f64 = 1e-4;
pub const GAMMA_MAX: f64 = 1e6;
/// Maximum number of λ halvings within one iteration.
pub const MAX_LAMBDA_HALVINGS: usize = 60;

/// Options of the EM solvers (shared with [`crate::spbsc`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub rule: RuleFamily,
    pub lambda_init: f64,
    pub max_iters: usize,
    /// Relative rollout-cost change threshold of the stall test.
    pub tol: f64,
    pub stall_window: usize,
    /// When false, λ stays at `lambda_init` (γ* is still recorded).
    pub temperature_update: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rule: RuleFamily::Gh3,
            lambda_init: 1.0,
            max_iters: 200,
            tol: 1e-6,
            stall_window: 3,
            temperature_update: true,
        }
    }
}

/// Closed-loop Gaussian beliefs over `ξ_t = (x_t, u_t)` and the terminal state.
#[derive(Debug, Clone)]
pub struct ClosedLoopBelief<T: Real> {
    pub stages: Vec<GaussianBelief<T>>,
    pub terminal: GaussianBelief<T>,
    /// `f_t` at each transformed sigma point of `stages[t]`, one per column.
    pub images: Vec<DMatrix<T>>,
}

impl<T: Real> ClosedLoopBelief<T> {
    pub fn state_mean(&self, t: usize, nx: usize) -> DVector<T> {
        if t < self.stages.len() {
            self.stages[t].mean().rows(0, nx).into_owned()
        } else {
            self.terminal.mean().clone()
        }
    }

    pub fn action_mean(&self, t: usize, nx: usize) -> DVector<T> {
        let m = self.stages[t].mean();
        m.rows(nx, m.len() - nx).into_owned()
    }
}

/// Joint belief over `(x, u)` induced by the affine Gaussian policy at `t`
/// on a state belief `N(μ_x, Σ_xx)`.
pub fn joint_belief<T: Real>(
    policy: &AffineGaussianPolicy<T>,
    t: usize,
    mean_x: &DVector<T>,
    cov_xx: &DMatrix<T>,
) -> Result<GaussianBelief<T>> {
    let gain = policy.feedback(t);
    let mean_u = policy.mean_action(t, mean_x);
    let cov_ux = gain * cov_xx;
    let cov_uu = &cov_ux * gain.transpose() + policy.covariance(t);
    GaussianBelief::new(concat(mean_x, &mean_u), block_symmetric(cov_xx, &cov_ux, &cov_uu))
}

/// Sigma images of the one-step dynamics, with a blow-up check at `t`.
pub(crate) fn propagate_points<T: Real>(
    instance: &ProblemInstance<T>,
    belief: &GaussianBelief<T>,
    rule: &SigmaRule<T>,
    t: usize,
) -> Result<DMatrix<T>> {
    let pts = belief.sigma_points(rule)?;
    let nx = instance.state_dim();
    let mut images = DMatrix::zeros(nx, pts.ncols());
    for (j, c) in pts.column_iter().enumerate() {
        let f = instance.system.step_joint(&c.into_owned());
        if !all_finite(&f) {
            return Err(Error::Blowup { t });
        }
        images.set_column(j, &f);
    }
    Ok(images)
}

/// Unscented closed-loop propagation of the initial belief under `policy`.
pub fn forward_pass<T: Real>(
    instance: &ProblemInstance<T>,
    policy: &AffineGaussianPolicy<T>,
    rule: &SigmaRule<T>,
) -> Result<ClosedLoopBelief<T>> {
    rule.check_dimension(instance.system.joint_dim())?;
    let horizon = instance.horizon();
    let mut mean_x = instance.initial_mean.clone();
    let mut cov_xx = instance.initial_covariance.clone();
    let mut stages = Vec::with_capacity(horizon);
    let mut images = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let joint = joint_belief(policy, t, &mean_x, &cov_xx)?;
        let f = propagate_points(instance, &joint, rule, t)?;
        let mm = moment_match_images(rule, &joint, f)?;
        mean_x = mm.mean;
        cov_xx = mm.covariance;
        images.push(mm.images);
        stages.push(joint);
    }
    let terminal = GaussianBelief::new(mean_x, cov_xx)?;
    Ok(ClosedLoopBelief {
        stages,
        terminal,
        images,
    })
}

/// Result of the regularized probabilistic update at one step.
#[derive(Debug, Clone)]
pub struct ProbabilisticUpdate<T: Real> {
    pub feedforward: DVector<T>,
    pub feedback: DMatrix<T>,
    pub covariance: DMatrix<T>,
    /// `V̂_t` about the state reference of `q`.
    pub value: QuadraticModel<T>,
}

/// `Σ* = (Σ⁻¹ + λQ_uu)⁻¹` together with the matching gains and value.
///
/// With `Σ = L Lᵀ` and `S = I + λ Lᵀ Q_uu L`, the update is evaluated as
/// `Σ* = L S⁻¹ Lᵀ`, `G = Σ* Σ⁻¹ = L S⁻¹ L⁻¹`, `K* = G K − λ Σ* Q_ux`,
/// `k* = G k − λ Σ* Q_u`, which never forms `Σ⁻¹`. Failure to factor `S`
/// means `Σ⁻¹ + λQ_uu` is not positive definite.
pub fn probabilistic_update<T: Real>(
    q: &QExpansion<T>,
    k: &DVector<T>,
    gain: &DMatrix<T>,
    sigma: &DMatrix<T>,
    lambda: T,
    t: usize,
) -> Result<ProbabilisticUpdate<T>> {
    let nx = q.state_dim;
    let quu = q.q_uu();
    let b = q.q_ux();
    let a = q.q_u();
    let l = cholesky_jittered(sigma, "policy covariance")?;
    let nu = l.nrows();
    let s = DMatrix::identity(nu, nu) + l.transpose() * &quu * &l * lambda;
    let ls = cholesky_jittered(&symmetrize(&s), "policy precision").map_err(|_| Error::NotPositiveDefiniteAt {
        what: "policy precision",
        t,
    })?;
    let tri = |m: &DMatrix<T>| l.solve_lower_triangular(m).expect("policy covariance factor is nonsingular");
    let s_solve = |m: &DMatrix<T>| {
        let y = ls.solve_lower_triangular(m).expect("precision factor is nonsingular");
        ls.tr_solve_lower_triangular(&y).expect("precision factor is nonsingular")
    };
    // Σ* = Wᵀ W with W = L_S⁻¹ Lᵀ
    let w = ls
        .solve_lower_triangular(&l.transpose())
        .expect("precision factor is nonsingular");
    let sigma_star = symmetrize(&(w.transpose() * &w));
    let as_col = |v: &DVector<T>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    let gk_mat = &l * s_solve(&tri(gain));
    let gk_vec = &l * s_solve(&tri(&as_col(k)));
    let gk_vec = gk_vec.column(0).into_owned();
    // Gᵀ y = L⁻ᵀ S⁻¹ Lᵀ y
    let gt = |m: &DMatrix<T>| {
        l.tr_solve_lower_triangular(&s_solve(&(l.transpose() * m)))
            .expect("policy covariance factor is nonsingular")
    };
    let gt_a = gt(&as_col(&a)).column(0).into_owned();
    let gt_b = gt(&b);
    let m = symmetrize(&gt(&quu));
    let sa = &sigma_star * &a;
    let sb = &sigma_star * &b;
    let new_gain = &gk_mat - &sb * lambda;
    let new_k = &gk_vec - &sa * lambda;
    let half = lit::<T>(0.5);
    let log_ratio = log_det_from_cholesky(&ls) * half / lambda;
    let value = QuadraticModel {
        reference: q.model.reference.rows(0, nx).into_owned(),
        constant: q.q0() + k.dot(&(&m * k)) * half + k.dot(&gt_a) - a.dot(&sa) * lambda * half + log_ratio,
        gradient: q.q_x() + gain.transpose() * (&m * k + &gt_a) + b.transpose() * &gk_vec
            - b.transpose() * &sa * lambda,
        hessian: symmetrize(
            &(q.q_xx() + gain.transpose() * &m * gain + gain.transpose() * &gt_b + gt_b.transpose() * gain
                - b.transpose() * &sb * lambda),
        ),
    };
    Ok(ProbabilisticUpdate {
        feedforward: new_k,
        feedback: new_gain,
        covariance: sigma_star,
        value,
    })
}

/// Output of [`backward_pass`].
#[derive(Debug, Clone)]
pub struct BackwardPass<T: Real> {
    pub policy: AffineGaussianPolicy<T>,
    /// `V̂_t`, `t = 0…T`, each about `μ_x,t`.
    pub values: Vec<QuadraticModel<T>>,
    /// `Q̂_t` about `μ_ξ,t`.
    pub q: Vec<QExpansion<T>>,
}

/// Fourier-Hermite fit of `Q_t(ξ) = c_t(ξ) − (1/λ) log λ + V̂_{t+1}(f_t(ξ))`
/// about `belief.stages[t]`, reusing the cached sigma images.
pub fn fit_q<T: Real>(
    instance: &ProblemInstance<T>,
    belief: &ClosedLoopBelief<T>,
    rule: &SigmaRule<T>,
    t: usize,
    next: &QuadraticModel<T>,
    lambda: T,
) -> Result<QExpansion<T>> {
    let stage = &belief.stages[t];
    let shift = lambda.ln() / lambda;
    let pts = stage.sigma_points(rule)?;
    let values: Vec<T> = pts
        .column_iter()
        .zip(belief.images[t].column_iter())
        .map(|(xi, f)| instance.cost.stage_cost_joint(&xi.into_owned()) - shift + next.evaluate(&f.into_owned()))
        .collect();
    Ok(QExpansion {
        model: fourier_hermite_fit_values(rule, stage, &values)?,
        state_dim: instance.state_dim(),
    })
}

/// Fourier-Hermite fit of `c_T − (1/λ) log λ` about the terminal belief.
pub fn fit_terminal<T: Real>(
    instance: &ProblemInstance<T>,
    belief: &ClosedLoopBelief<T>,
    family: RuleFamily,
    lambda: T,
) -> Result<QuadraticModel<T>> {
    let rule = make_rule::<T>(family, instance.state_dim())?;
    let shift = lambda.ln() / lambda;
    let values: Vec<T> = belief
        .terminal
        .sigma_points(&rule)?
        .column_iter()
        .map(|x| instance.cost.terminal_cost(&x.into_owned()) - shift)
        .collect();
    fourier_hermite_fit_values(&rule, &belief.terminal, &values)
}

/// Backward pass about `belief` with prior `prior` and temperature `λ`.
pub fn backward_pass<T: Real>(
    instance: &ProblemInstance<T>,
    belief: &ClosedLoopBelief<T>,
    prior: &AffineGaussianPolicy<T>,
    rule: &SigmaRule<T>,
    lambda: T,
) -> Result<BackwardPass<T>> {
    let horizon = instance.horizon();
    let nx = instance.state_dim();
    let means_x: Vec<DVector<T>> = (0..horizon).map(|t| belief.state_mean(t, nx)).collect();
    let means_u: Vec<DVector<T>> = (0..horizon).map(|t| belief.action_mean(t, nx)).collect();
    let prior = prior.re_reference(&means_x, &means_u)?;
    let mut values = vec![fit_terminal(instance, belief, rule.family(), lambda)?];
    let mut qs = Vec::with_capacity(horizon);
    let mut ks = Vec::with_capacity(horizon);
    let mut gains = Vec::with_capacity(horizon);
    let mut covs = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let q = fit_q(instance, belief, rule, t, values.last().expect("terminal value"), lambda)?;
        let up = probabilistic_update(&q, prior.feedforward(t), prior.feedback(t), prior.covariance(t), lambda, t)?;
        ks.push(up.feedforward);
        gains.push(up.feedback);
        covs.push(up.covariance);
        values.push(up.value);
        qs.push(q);
    }
    ks.reverse();
    gains.reverse();
    covs.reverse();
    values.reverse();
    qs.reverse();
    Ok(BackwardPass {
        policy: AffineGaussianPolicy::new(ks, gains, covs, means_x, means_u)?,
        values,
        q: qs,
    })
}

/// Quadrature estimate of `E[Σ_t c_t(ξ_t) + c_T(x_T)]` under `belief`.
pub fn expected_cost<T: Real>(
    instance: &ProblemInstance<T>,
    belief: &ClosedLoopBelief<T>,
    rule: &SigmaRule<T>,
) -> Result<T> {
    let mut total = T::zero();
    for stage in &belief.stages {
        let pts = stage.sigma_points(rule)?;
        for (c, &w) in pts.column_iter().zip(rule.weights()) {
            total += instance.cost.stage_cost_joint(&c.into_owned()) * w;
        }
    }
    let state_rule = make_rule::<T>(rule.family(), instance.state_dim())?;
    let pts = belief.terminal.sigma_points(&state_rule)?;
    for (c, &w) in pts.column_iter().zip(state_rule.weights()) {
        total += instance.cost.terminal_cost(&c.into_owned()) * w;
    }
    Ok(total)
}

/// `γ* = (T + 1) / E`, clamped to `[GAMMA_MIN, GAMMA_MAX]`.
pub fn gamma_from_expected_cost(horizon: usize, expected: f64) -> f64 {
    if expected > 0.0 {
        return ((horizon as f64 + 1.0) / expected).clamp(GAMMA_MIN, GAMMA_MAX);
    }
    log::warn!("expected cost {expected:e} gives no usable temperature; clamping");
    if expected == 0.0 {
        GAMMA_MAX
    } else {
        GAMMA_MIN
    }
}

/// `(γ*, E)` from the forward belief of the new policy.
pub fn temperature_update<T: Real>(
    instance: &ProblemInstance<T>,
    belief: &ClosedLoopBelief<T>,
    rule: &SigmaRule<T>,
) -> Result<(f64, f64)> {
    let expected = to_f64(expected_cost(instance, belief, rule)?);
    Ok((gamma_from_expected_cost(instance.horizon(), expected), expected))
}

/// Backward pass with λ halved on positive-definiteness failures.
pub(crate) fn with_lambda_fallback<T: Real, R>(
    lambda: f64,
    iter: usize,
    mut f: impl FnMut(T) -> Result<R>,
) -> Result<(R, f64)> {
    let mut lambda = lambda;
    for _ in 0..=MAX_LAMBDA_HALVINGS {
        match f(lit(lambda)) {
            Ok(r) => return Ok((r, lambda)),
            Err(Error::NotPositiveDefiniteAt { what, t }) => {
                log::warn!("iteration {iter}: {what} not positive definite at t={t}; halving lambda {lambda:e}");
                lambda *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::NotPositiveDefinite {
        what: "probabilistic update after lambda halving",
    })
}

/// SP-PDP from the prior `initial`.
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
    let mut belief = forward_pass(instance, &policy, &rule)?;
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
            let (pass, used) = with_lambda_fallback(lambda, iter, |l: T| backward_pass(instance, &belief, &policy, &rule, l))?;
            let next_belief = forward_pass(instance, &pass.policy, &rule)?;
            let (gamma, expected) = temperature_update(instance, &next_belief, &rule)?;
            let means_x: Vec<_> = (0..instance.horizon()).map(|t| next_belief.state_mean(t, nx)).collect();
            let means_u: Vec<_> = (0..instance.horizon()).map(|t| next_belief.action_mean(t, nx)).collect();
            let next_policy = pass.policy.re_reference(&means_x, &means_u)?;
            let rollout = next_policy.rollout_mean(instance)?;
            Ok((next_policy, next_belief, gamma, expected, used, rollout.cost))
        })();
        let (next_policy, next_belief, gamma, expected, used, new_cost) = step.map_err(|e| e.at_iteration(iter))?;
        policy = next_policy;
        belief = next_belief;
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
