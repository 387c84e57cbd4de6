mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use sigma_traj::ddp::{solve_ddp, DdpOptions};
use sigma_traj::quadrature::{make_rule, RuleFamily};
use sigma_traj::sppdp::SolverConfig;
use sigma_traj::models::LinearSystem;
use sigma_traj::{spbsc, sppdp, Policy, ProblemInstance, QuadraticCost, SystemSpec};

fn gain_error(instance: &ProblemInstance, policy: &Policy) -> f64 {
    let r = riccati(instance);
    (0..instance.horizon())
        .map(|t| {
            let dk = max_abs(&(policy.feedback(t) - &r.feedback[t]));
            let dff = max_abs(&DMatrix::from_column_slice(
                r.feedforward[t].len(),
                1,
                (policy.absolute_feedforward(t) - &r.feedforward[t]).as_slice(),
            ));
            dk.max(dff)
        })
        .fold(0.0, f64::max)
}

fn em_config(rule: RuleFamily) -> SolverConfig {
    SolverConfig {
        rule,
        max_iters: 30,
        tol: 0.0,
        ..Default::default()
    }
}

fn broad_prior(instance: &ProblemInstance) -> Policy {
    let nu = instance.control_dim();
    Policy::prior(instance.horizon(), instance.state_dim(), &(DMatrix::identity(nu, nu) * 1e6)).unwrap()
}

#[test]
fn ddp_matches_riccati_in_one_iteration() {
    for seed in 0..20 {
        let inst = random_lq(seed);
        let (policy, trace) = solve_ddp(&inst, &DdpOptions::default(), false, &broad_prior(&inst)).unwrap();
        let r = riccati(&inst);
        assert!((trace.records[1].total_cost - r.cost).abs() <= 1e-8 * r.cost.max(1.0), "seed {seed}");
        assert!(gain_error(&inst, &policy) < 1e-6, "seed {seed}: {}", gain_error(&inst, &policy));
    }
}

#[test]
fn sppdp_matches_riccati() {
    for seed in 0..20 {
        let inst = random_lq(seed);
        let (policy, _) = sppdp::solve(&inst, &em_config(RuleFamily::Gh3), &broad_prior(&inst)).unwrap();
        let e = gain_error(&inst, &policy);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn spbsc_matches_riccati() {
    for seed in 0..20 {
        let inst = random_lq(seed);
        let (policy, _) = spbsc::solve(&inst, &em_config(RuleFamily::Ut5), &broad_prior(&inst)).unwrap();
        let e = gain_error(&inst, &policy);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn linear_solve_is_rule_independent() {
    for seed in 0..5 {
        let inst = random_lq(100 + seed);
        let mut cfg = em_config(RuleFamily::Ut5);
        cfg.max_iters = 5;
        let (a, _) = sppdp::solve(&inst, &cfg, &broad_prior(&inst)).unwrap();
        cfg.rule = RuleFamily::Gh3;
        let (b, _) = sppdp::solve(&inst, &cfg, &broad_prior(&inst)).unwrap();
        for t in 0..inst.horizon() {
            assert!(max_abs(&(a.feedback(t) - b.feedback(t))) < 1e-6);
        }
    }
}

#[test]
fn filter_and_smoother_match_kalman_rts() {
    for seed in 0..20 {
        let inst = random_lq(200 + seed);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let (nx, nu, horizon) = (inst.state_dim(), inst.control_dim(), inst.horizon());
        let ks: Vec<_> = (0..horizon).map(|_| gaussian_vector(&mut rng, nu, 0.5)).collect();
        let gains: Vec<_> = (0..horizon).map(|_| gaussian_matrix(&mut rng, nu, nx, 0.3)).collect();
        let sigmas: Vec<_> = (0..horizon).map(|_| random_pd(&mut rng, nu, 0.2, 0.1)).collect();
        let policy = Policy::new(
            ks.clone(),
            gains.clone(),
            sigmas.clone(),
            vec![nalgebra::DVector::zeros(nx); horizon],
            vec![nalgebra::DVector::zeros(nu); horizon],
        )
        .unwrap();
        let lambda = 0.7;
        let rule = make_rule(RuleFamily::Gh3, nx + nu).unwrap();
        let filter = spbsc::filter_pass(&inst, &policy, &rule, lambda).unwrap();
        let smoothed = spbsc::smooth_pass(&filter, nx).unwrap();
        let oracle = linear_smoother(&inst, &ks, &gains, &sigmas, lambda);
        for t in 0..horizon {
            let (m, p) = &oracle.filtered[t];
            assert!((filter.steps[t].filtered.mean() - m).amax() < 1e-8, "seed {seed} t {t}");
            assert!(max_abs(&(filter.steps[t].filtered.covariance() - p)) < 1e-8, "seed {seed} t {t}");
            let (m, p) = &oracle.smoothed[t];
            assert!((&smoothed.stages[t].mean - m).amax() < 1e-8, "seed {seed} t {t}");
            assert!(max_abs(&(&smoothed.stages[t].covariance - p)) < 1e-7, "seed {seed} t {t}");
        }
        let (m, p) = &oracle.smoothed_terminal;
        assert!((&smoothed.terminal.mean - m).amax() < 1e-8);
        assert!(max_abs(&(&smoothed.terminal.covariance - p)) < 1e-7);
    }
}

fn fixed_temperature(iters: usize) -> SolverConfig {
    SolverConfig {
        rule: RuleFamily::Gh3,
        max_iters: iters,
        tol: 0.0,
        lambda_init: 1.0,
        temperature_update: false,
        ..Default::default()
    }
}

fn scalar_one_step() -> ProblemInstance {
    let sys = SystemSpec::new(LinearSystem { a: DMatrix::from_element(1, 1, 0.4), b: DMatrix::from_element(1, 1, 1.5) }, 0.1, 1).unwrap();
    let cost = QuadraticCost::new(
        DVector::from_element(1, 0.3),
        DMatrix::from_element(1, 1, 0.2),
        DMatrix::from_element(1, 1, 0.05),
        DMatrix::from_element(1, 1, 3.0),
    )
    .unwrap();
    ProblemInstance::new(sys, cost, DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1e-3)).unwrap()
}

/// Precision grows by `λ Q_uu` per iteration, so the gain error after
/// `N` iterations is `|K* − K_0| P_0 / (P_0 + N λ Q_uu)`.
#[test]
fn fixed_temperature_gain_error_follows_precision_accumulation() {
    let inst = scalar_one_step();
    let (a, b) = discrete_matrices(&inst);
    let (a, b) = (a[(0, 0)], b[(0, 0)]);
    let (r, wt) = (0.05, 3.0);
    let quu = 2.0 * (r + wt * b * b);
    let k_star = riccati(&inst).feedback[0][(0, 0)];
    assert!((k_star + wt * a * b / (r + wt * b * b)).abs() < 1e-12);
    let p0 = 1e-3;
    let prior = Policy::prior(1, 1, &DMatrix::from_element(1, 1, 1.0 / p0)).unwrap();
    for n in [1usize, 3, 10] {
        let (policy, _) = sppdp::solve(&inst, &fixed_temperature(n), &prior).unwrap();
        let predicted = k_star.abs() * p0 / (p0 + n as f64 * quu);
        let got = (policy.feedback(0)[(0, 0)] - k_star).abs();
        assert!((got - predicted).abs() < 1e-9 * predicted.max(1e-12) + 1e-13, "N={n}: {got:e} vs {predicted:e}");
        assert!((policy.covariance(0)[(0, 0)] - 1.0 / (p0 + n as f64 * quu)).abs() < 1e-9);
    }
}

fn double_integrator() -> ProblemInstance {
    let sys = SystemSpec::new(
        LinearSystem {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        },
        0.1,
        20,
    )
    .unwrap();
    let cost = QuadraticCost::new(
        DVector::zeros(2),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
        DMatrix::identity(2, 2) * 10.0,
    )
    .unwrap();
    ProblemInstance::new(sys, cost, DVector::from_row_slice(&[1.0, 0.0]), DMatrix::identity(2, 2) * 1e-3).unwrap()
}

#[test]
fn sppdp_diffuse_prior_reaches_riccati_in_ten_iterations() {
    let inst = double_integrator();
    let prior = Policy::prior(20, 2, &(DMatrix::identity(1, 1) * 1e3)).unwrap();
    let (policy, _) = sppdp::solve(&inst, &fixed_temperature(10), &prior).unwrap();
    let r = riccati(&inst);
    let e = (0..20).map(|t| max_abs(&(policy.feedback(t) - &r.feedback[t]))).fold(0.0, f64::max);
    assert!(e < 1e-4, "{e:e}");
}
