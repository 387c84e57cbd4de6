#![allow(dead_code)]

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sigma_traj::models::{CartPole, LinearSystem, Pendulum, SystemSpec};
use sigma_traj::{ProblemInstance, QuadraticCost};

pub fn pendulum() -> ProblemInstance {
    let sys = SystemSpec::pendulum(Pendulum::default(), 0.1, 50).unwrap();
    let cost = QuadraticCost::new(
        DVector::from_row_slice(&[FRAC_PI_2, 0.0]),
        DMatrix::identity(2, 2) * 0.1,
        DMatrix::identity(1, 1) * 0.1,
        DMatrix::identity(2, 2) * 100.0,
    )
    .unwrap();
    ProblemInstance::new(sys, cost, DVector::zeros(2), DMatrix::identity(2, 2) * 1e-3).unwrap()
}

pub fn cart_pole() -> ProblemInstance {
    let sys = SystemSpec::cart_pole(CartPole::default(), 0.1, 30).unwrap();
    let cost = QuadraticCost::new(
        DVector::from_row_slice(&[0.0, PI, 0.0, 0.0]),
        DMatrix::identity(4, 4) * 0.1,
        DMatrix::identity(1, 1) * 0.1,
        DMatrix::identity(4, 4) * 100.0,
    )
    .unwrap();
    ProblemInstance::new(
        sys,
        cost,
        DVector::from_row_slice(&[-1.0, FRAC_PI_2, 0.0, 0.0]),
        DMatrix::identity(4, 4) * 1e-3,
    )
    .unwrap()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `M Mᵀ + floor·I`.
pub fn random_pd(rng: &mut ChaCha8Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let m = gaussian_matrix(rng, n, n, scale.sqrt());
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

/// Random continuous-time linear plant with PD quadratic costs.
pub fn random_lq(seed: u64) -> ProblemInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = rng.random_range(1..=4);
    let nu = rng.random_range(1..=2);
    let horizon = rng.random_range(3..=20);
    let a = gaussian_matrix(&mut rng, nx, nx, 0.5);
    let b = gaussian_matrix(&mut rng, nx, nu, 1.0);
    let sys = SystemSpec::new(LinearSystem { a, b }, 0.1, horizon).unwrap();
    let cost = QuadraticCost::new(
        gaussian_vector(&mut rng, nx, 1.0),
        random_pd(&mut rng, nx, 0.1, 0.05),
        random_pd(&mut rng, nu, 0.1, 0.05),
        random_pd(&mut rng, nx, 1.0, 0.5),
    )
    .unwrap();
    let x0 = gaussian_vector(&mut rng, nx, 1.0);
    ProblemInstance::new(sys, cost, x0, DMatrix::identity(nx, nx) * 1e-3).unwrap()
}

/// Discrete `(A_d, B_d)` recovered from the step map by probing basis vectors.
pub fn discrete_matrices(instance: &ProblemInstance) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = instance.state_dim();
    let nu = instance.control_dim();
    let zx = DVector::zeros(nx);
    let zu = DVector::zeros(nu);
    let base = instance.system.step(&zx, &zu);
    let mut a = DMatrix::zeros(nx, nx);
    for i in 0..nx {
        let mut e = zx.clone();
        e[i] = 1.0;
        a.set_column(i, &(instance.system.step(&e, &zu) - &base));
    }
    let mut b = DMatrix::zeros(nx, nu);
    for i in 0..nu {
        let mut e = zu.clone();
        e[i] = 1.0;
        b.set_column(i, &(instance.system.step(&zx, &e) - &base));
    }
    (a, b)
}

/// Time-varying LQR solution `u_t = k_t + K_t x_t` of
/// `Σ (x−g)ᵀW(x−g) + uᵀRu + (x_T−g)ᵀW_T(x_T−g)`.
pub struct Riccati {
    pub feedforward: Vec<DVector<f64>>,
    pub feedback: Vec<DMatrix<f64>>,
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
}

pub fn riccati(instance: &ProblemInstance) -> Riccati {
    let (a, b) = discrete_matrices(instance);
    let c = &instance.cost;
    let g = &c.goal;
    let horizon = instance.horizon();
    let mut s = &c.terminal_weight * 2.0;
    let mut v = -(&c.terminal_weight * g) * 2.0;
    let mut ks = vec![DVector::zeros(0); horizon];
    let mut gains = vec![DMatrix::zeros(0, 0); horizon];
    for t in (0..horizon).rev() {
        let qxx = &c.state_weight * 2.0 + a.transpose() * &s * &a;
        let quu = &c.control_weight * 2.0 + b.transpose() * &s * &b;
        let qux = b.transpose() * &s * &a;
        let qx = -(&c.state_weight * g) * 2.0 + a.transpose() * &v;
        let qu = b.transpose() * &v;
        let inv = quu.clone().try_inverse().unwrap();
        let gain = -&inv * &qux;
        let k = -&inv * &qu;
        s = &qxx + qux.transpose() * &gain;
        s = (&s + s.transpose()) * 0.5;
        v = &qx + qux.transpose() * &k;
        ks[t] = k;
        gains[t] = gain;
    }
    let mut states = vec![instance.initial_mean.clone()];
    let mut cost = 0.0;
    for t in 0..horizon {
        let x = states[t].clone();
        let u = &ks[t] + &gains[t] * &x;
        cost += c.stage_cost(&x, &u);
        states.push(&a * &x + &b * &u);
    }
    cost += c.terminal_cost(&states[horizon]);
    Riccati {
        feedforward: ks,
        feedback: gains,
        states,
        cost,
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Gaussian over `(x, u)` with `u = k + K x + N(0, Σ)`.
pub fn affine_joint(
    mean_x: &DVector<f64>,
    cov_x: &DMatrix<f64>,
    k: &DVector<f64>,
    gain: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let nx = mean_x.len();
    let nu = k.len();
    let mut mean = DVector::zeros(nx + nu);
    mean.rows_mut(0, nx).copy_from(mean_x);
    mean.rows_mut(nx, nu).copy_from(&(k + gain * mean_x));
    let mut cov = DMatrix::zeros(nx + nu, nx + nu);
    cov.view_mut((0, 0), (nx, nx)).copy_from(cov_x);
    let ux = gain * cov_x;
    cov.view_mut((nx, 0), (nu, nx)).copy_from(&ux);
    cov.view_mut((0, nx), (nx, nu)).copy_from(&ux.transpose());
    cov.view_mut((nx, nx), (nu, nu)).copy_from(&(&ux * gain.transpose() + sigma));
    (mean, cov)
}

/// Kalman update for the pseudo-measurement `z = H ξ + N(0, (λ Λ)⁻¹)` that
/// `exp(−λ (ξ−z)ᵀ Λ/2 (ξ−z))` represents, in gain form.
pub fn kalman_update(mean: &DVector<f64>, cov: &DMatrix<f64>, target: &DVector<f64>, precision: &DMatrix<f64>, lambda: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = mean.len();
    let noise = (precision * lambda).try_inverse().unwrap();
    let s = cov + noise;
    let gain = cov * s.try_inverse().unwrap();
    let m = mean + &gain * (target - mean);
    let p = (DMatrix::identity(n, n) - &gain) * cov;
    (m, (&p + p.transpose()) * 0.5)
}

/// Moments of the classical Kalman filter and RTS smoother for an affine
/// policy on a linear plant with the quadratic cost as pseudo-measurement.
pub struct LinearSmoother {
    pub filtered: Vec<(DVector<f64>, DMatrix<f64>)>,
    pub smoothed: Vec<(DVector<f64>, DMatrix<f64>)>,
    pub smoothed_terminal: (DVector<f64>, DMatrix<f64>),
}

pub fn linear_smoother(
    instance: &ProblemInstance,
    ks: &[DVector<f64>],
    gains: &[DMatrix<f64>],
    sigmas: &[DMatrix<f64>],
    lambda: f64,
) -> LinearSmoother {
    let (a, b) = discrete_matrices(instance);
    let nx = instance.state_dim();
    let nu = instance.control_dim();
    let c = &instance.cost;
    let horizon = instance.horizon();
    let mut f = DMatrix::zeros(nx, nx + nu);
    f.view_mut((0, 0), (nx, nx)).copy_from(&a);
    f.view_mut((0, nx), (nx, nu)).copy_from(&b);
    let mut stage_precision = DMatrix::zeros(nx + nu, nx + nu);
    stage_precision.view_mut((0, 0), (nx, nx)).copy_from(&(&c.state_weight * 2.0));
    stage_precision.view_mut((nx, nx), (nu, nu)).copy_from(&(&c.control_weight * 2.0));
    let mut stage_target = DVector::zeros(nx + nu);
    stage_target.rows_mut(0, nx).copy_from(&c.goal);

    let mut filtered = Vec::new();
    let mut predicted_x = Vec::new();
    let (mut mx, mut px) = (instance.initial_mean.clone(), instance.initial_covariance.clone());
    for t in 0..horizon {
        let (m, p) = affine_joint(&mx, &px, &ks[t], &gains[t], &sigmas[t]);
        let (mf, pf) = kalman_update(&m, &p, &stage_target, &stage_precision, lambda);
        mx = &f * &mf;
        px = &f * &pf * f.transpose();
        px = (&px + px.transpose()) * 0.5;
        predicted_x.push((mx.clone(), px.clone()));
        filtered.push((mf, pf));
    }
    let terminal = kalman_update(&mx, &px, &c.goal, &(&c.terminal_weight * 2.0), lambda);
    let mut smoothed = vec![(DVector::zeros(0), DMatrix::zeros(0, 0)); horizon];
    let (mut ms, mut ps) = terminal.clone();
    for t in (0..horizon).rev() {
        let (mf, pf) = &filtered[t];
        let (mp, pp) = &predicted_x[t];
        let g = pf * f.transpose() * pp.clone().try_inverse().unwrap();
        let m = mf + &g * (&ms - mp);
        let p = pf + &g * (&ps - pp) * g.transpose();
        smoothed[t] = (m.clone(), (&p + p.transpose()) * 0.5);
        ms = m.rows(0, nx).into_owned();
        ps = smoothed[t].1.view((0, 0), (nx, nx)).into_owned();
    }
    LinearSmoother {
        filtered,
        smoothed,
        smoothed_terminal: terminal,
    }
}

/// Sample mean and covariance of rows.
pub fn sample_moments(samples: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let e = s - &mean;
        cov += &e * e.transpose();
    }
    (mean, cov / (n - 1.0))
}

/// Symmetric square root with negative eigenvalues clipped.
pub fn psd_root(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}
