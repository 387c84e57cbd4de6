//! Plants, RK4 discretization and quadratic costs.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{all_finite, ensure_len, ensure_square, min_eigenvalue, symmetrize};
use crate::{lit, Error, Real, Result};

/// Continuous-time dynamics `ẋ = f(x, u)`.
pub trait ContinuousDynamics<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn derivative(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T>;

    /// Analytic `(∂f/∂x, ∂f/∂u)`, when the plant provides them.
    fn jacobians(&self, _x: &DVector<T>, _u: &DVector<T>) -> Option<(DMatrix<T>, DMatrix<T>)> {
        None
    }
}

/// Damped pendulum, `θ = 0` hanging down, torque input.
#[derive(Debug, Clone, PartialEq)]
pub struct Pendulum<T> {
    pub mass: T,
    pub length: T,
    pub gravity: T,
    pub damping: T,
}

impl<T: Real> Default for Pendulum<T> {
    fn default() -> Self {
        Pendulum {
            mass: T::one(),
            length: T::one(),
            gravity: lit(9.81),
            damping: lit(0.1),
        }
    }
}

impl<T: Real> Pendulum<T> {
    fn inertia(&self) -> T {
        self.mass * self.length * self.length
    }

    /// Kinetic plus potential energy (zero at the downward rest state).
    pub fn energy(&self, x: &DVector<T>) -> T {
        let half = lit::<T>(0.5);
        half * self.inertia() * x[1] * x[1] + self.mass * self.gravity * self.length * (T::one() - x[0].cos())
    }
}

impl<T: Real> ContinuousDynamics<T> for Pendulum<T> {
    fn name(&self) -> &str {
        "pendulum"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn derivative(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let (theta, omega) = (x[0], x[1]);
        let accel = (u[0] - self.mass * self.gravity * self.length * theta.sin() - self.damping * omega) / self.inertia();
        DVector::from_vec(vec![omega, accel])
    }
    fn jacobians(&self, x: &DVector<T>, _u: &DVector<T>) -> Option<(DMatrix<T>, DMatrix<T>)> {
        let i = self.inertia();
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[
                T::zero(),
                T::one(),
                -self.mass * self.gravity * self.length * x[0].cos() / i,
                -self.damping / i,
            ],
        );
        let b = DMatrix::from_row_slice(2, 1, &[T::zero(), T::one() / i]);
        Some((a, b))
    }
}

/// Cart-pole with the pole mass concentrated at distance `pole_length`
/// from the pivot. State `(p, θ, ṗ, θ̇)`, `θ = 0` hanging down, force input.
#[derive(Debug, Clone, PartialEq)]
pub struct CartPole<T> {
    pub cart_mass: T,
    pub pole_mass: T,
    pub pole_length: T,
    pub gravity: T,
}

impl<T: Real> Default for CartPole<T> {
    fn default() -> Self {
        CartPole {
            cart_mass: T::one(),
            pole_mass: lit(0.1),
            pole_length: lit(0.5),
            gravity: lit(9.81),
        }
    }
}

impl<T: Real> ContinuousDynamics<T> for CartPole<T> {
    fn name(&self) -> &str {
        "cart_pole"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn derivative(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let (theta, pdot, tdot) = (x[1], x[2], x[3]);
        let (s, c) = (theta.sin(), theta.cos());
        let (mc, mp, l, g) = (self.cart_mass, self.pole_mass, self.pole_length, self.gravity);
        let denom = mc + mp * s * s;
        let pddot = (u[0] + mp * s * (l * tdot * tdot + g * c)) / denom;
        let tddot = (-u[0] * c - mp * l * tdot * tdot * c * s - (mc + mp) * g * s) / (l * denom);
        DVector::from_vec(vec![pdot, tdot, pddot, tddot])
    }
}

/// Planar serial arm of `n` revolute joints with point masses at the link
/// tips, viscous joint damping and gravity along −y. Joint angles are
/// relative; `q = 0` stretches the arm along +x.
#[derive(Debug, Clone, PartialEq)]
pub struct NLinkArm<T> {
    pub masses: Vec<T>,
    pub lengths: Vec<T>,
    pub damping: T,
    pub gravity: T,
}

impl<T: Real> NLinkArm<T> {
    pub fn uniform(links: usize) -> Self {
        NLinkArm {
            masses: vec![T::one(); links],
            lengths: vec![lit(0.5); links],
            damping: lit(0.1),
            gravity: lit(9.81),
        }
    }

    pub fn links(&self) -> usize {
        self.masses.len()
    }

    /// Absolute link angles `φ_a = Σ_{j≤a} q_j` and their rates.
    fn absolute(&self, x: &DVector<T>) -> (Vec<T>, Vec<T>) {
        let n = self.links();
        let mut phi = vec![T::zero(); n];
        let mut rate = vec![T::zero(); n];
        let (mut acc, mut acc_rate) = (T::zero(), T::zero());
        for a in 0..n {
            acc += x[a];
            acc_rate += x[n + a];
            phi[a] = acc;
            rate[a] = acc_rate;
        }
        (phi, rate)
    }

    /// Mass carried outboard of (and including) link `a`.
    fn outboard_mass(&self, a: usize) -> T {
        self.masses[a..].iter().fold(T::zero(), |s, &m| s + m)
    }

    pub fn energy(&self, x: &DVector<T>) -> T {
        let n = self.links();
        let (phi, rate) = self.absolute(x);
        let half = lit::<T>(0.5);
        let mut kinetic = T::zero();
        for a in 0..n {
            for b in 0..n {
                let mu = self.outboard_mass(a.max(b));
                kinetic += half * mu * self.lengths[a] * self.lengths[b] * (phi[a] - phi[b]).cos() * rate[a] * rate[b];
            }
        }
        let potential = (0..n).fold(T::zero(), |s, a| {
            s + self.outboard_mass(a) * self.gravity * self.lengths[a] * phi[a].sin()
        });
        kinetic + potential
    }
}

impl<T: Real> ContinuousDynamics<T> for NLinkArm<T> {
    fn name(&self) -> &str {
        "n_link_arm"
    }
    fn state_dim(&self) -> usize {
        2 * self.links()
    }
    fn control_dim(&self) -> usize {
        self.links()
    }
    fn derivative(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let n = self.links();
        let (phi, rate) = self.absolute(x);
        // Lagrangian in absolute angles: M(φ) φ̈ + h(φ, φ̇) + G(φ) = S⁻ᵀ τ
        let mut mass = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for a in 0..n {
            let mut h = T::zero();
            for b in 0..n {
                let mu = self.outboard_mass(a.max(b)) * self.lengths[a] * self.lengths[b];
                mass[(a, b)] = mu * (phi[a] - phi[b]).cos();
                h += mu * (phi[a] - phi[b]).sin() * rate[b] * rate[b];
            }
            let grav = self.outboard_mass(a) * self.gravity * self.lengths[a] * phi[a].cos();
            let torque = |j: usize| u[j] - self.damping * x[n + j];
            let generalized = if a + 1 < n { torque(a) - torque(a + 1) } else { torque(a) };
            rhs[a] = generalized - h - grav;
        }
        let phi_ddot = mass
            .cholesky()
            .map(|c| c.solve(&rhs))
            .unwrap_or_else(|| DVector::from_element(n, lit::<T>(f64::NAN)));
        let mut out = DVector::zeros(2 * n);
        for a in 0..n {
            out[a] = x[n + a];
            out[n + a] = if a == 0 { phi_ddot[0] } else { phi_ddot[a] - phi_ddot[a - 1] };
        }
        out
    }
}

/// Linear time-invariant `ẋ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
}

impl<T: Real> ContinuousDynamics<T> for LinearSystem<T> {
    fn name(&self) -> &str {
        "linear"
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn derivative(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        &self.a * x + &self.b * u
    }
    fn jacobians(&self, _x: &DVector<T>, _u: &DVector<T>) -> Option<(DMatrix<T>, DMatrix<T>)> {
        Some((self.a.clone(), self.b.clone()))
    }
}

/// Plant, sampling time and horizon.
#[derive(Clone)]
pub struct SystemSpec<T: Real> {
    dynamics: Arc<dyn ContinuousDynamics<T>>,
    pub dt: T,
    pub horizon: usize,
}

impl<T: Real> fmt::Debug for SystemSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("dynamics", &self.dynamics.name())
            .field("n_x", &self.state_dim())
            .field("n_u", &self.control_dim())
            .field("dt", &self.dt)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl<T: Real> SystemSpec<T> {
    pub fn new(dynamics: impl ContinuousDynamics<T> + 'static, dt: T, horizon: usize) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::InvalidArgument("sampling time must be positive".into()));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        Ok(SystemSpec {
            dynamics: Arc::new(dynamics),
            dt,
            horizon,
        })
    }

    pub fn pendulum(params: Pendulum<T>, dt: T, horizon: usize) -> Result<Self> {
        Self::new(params, dt, horizon)
    }

    pub fn cart_pole(params: CartPole<T>, dt: T, horizon: usize) -> Result<Self> {
        Self::new(params, dt, horizon)
    }

    pub fn n_link_arm(params: NLinkArm<T>, dt: T, horizon: usize) -> Result<Self> {
        if params.links() == 0 || params.lengths.len() != params.links() {
            return Err(Error::InvalidArgument("arm needs matching, non-empty masses and lengths".into()));
        }
        Self::new(params, dt, horizon)
    }

    pub fn dynamics(&self) -> &dyn ContinuousDynamics<T> {
        self.dynamics.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    /// Joint state-action dimension `n_x + n_u`.
    pub fn joint_dim(&self) -> usize {
        self.state_dim() + self.control_dim()
    }

    /// One RK4 step of length `dt` with `u` held constant.
    pub fn step(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let f = |x: &DVector<T>| self.dynamics.derivative(x, u);
        let h = self.dt;
        let half = lit::<T>(0.5);
        let k1 = f(x);
        let k2 = f(&(x + &k1 * (h * half)));
        let k3 = f(&(x + &k2 * (h * half)));
        let k4 = f(&(x + &k3 * h));
        x + (k1 + (k2 + k3) * lit::<T>(2.0) + k4) * (h / lit::<T>(6.0))
    }

    /// [`step`](Self::step) that reports non-finite results as a blow-up at `t`.
    pub fn step_checked(&self, x: &DVector<T>, u: &DVector<T>, t: usize) -> Result<DVector<T>> {
        let next = self.step(x, u);
        if !all_finite(&next) {
            return Err(Error::Blowup { t });
        }
        Ok(next)
    }

    /// Step evaluated on a stacked `ξ = (x, u)`.
    pub fn step_joint(&self, xi: &DVector<T>) -> DVector<T> {
        let nx = self.state_dim();
        let x = xi.rows(0, nx).into_owned();
        let u = xi.rows(nx, self.control_dim()).into_owned();
        self.step(&x, &u)
    }

    /// Jacobians of the RK4 step by propagating the tangent-linear model,
    /// or `None` when the plant has no analytic Jacobians.
    pub fn step_jacobians_analytic(&self, x: &DVector<T>, u: &DVector<T>) -> Option<(DMatrix<T>, DMatrix<T>)> {
        let (nx, nu) = (self.state_dim(), self.control_dim());
        let h = self.dt;
        let half = lit::<T>(0.5);
        // sensitivities of each stage input w.r.t. (x, u), stacked as nx × (nx+nu)
        let mut seed = DMatrix::zeros(nx, nx + nu);
        seed.view_mut((0, 0), (nx, nx)).fill_with_identity();
        let stage = |xs: &DVector<T>, ds: &DMatrix<T>| -> Option<(DVector<T>, DMatrix<T>)> {
            let (a, b) = self.dynamics.jacobians(xs, u)?;
            let mut dk = &a * ds;
            let mut du = dk.view_mut((0, nx), (nx, nu));
            du += &b;
            Some((self.dynamics.derivative(xs, u), dk))
        };
        let (k1, d1) = stage(x, &seed)?;
        let (k2, d2) = stage(&(x + &k1 * (h * half)), &(&seed + &d1 * (h * half)))?;
        let (k3, d3) = stage(&(x + &k2 * (h * half)), &(&seed + &d2 * (h * half)))?;
        let (_, d4) = stage(&(x + &k3 * h), &(&seed + &d3 * h))?;
        let total = &seed + (d1 + (d2 + d3) * lit::<T>(2.0) + d4) * (h / lit::<T>(6.0));
        Some((
            total.view((0, 0), (nx, nx)).into_owned(),
            total.view((0, nx), (nx, nu)).into_owned(),
        ))
    }

    /// Central finite-difference Jacobians of the RK4 step, step `1e-6·max(1, |ξ_i|)`.
    pub fn step_jacobians_fd(&self, x: &DVector<T>, u: &DVector<T>) -> (DMatrix<T>, DMatrix<T>) {
        let nx = self.state_dim();
        let xi = crate::linalg::concat(x, u);
        let jac = finite_difference_jacobian(|v| self.step_joint(v), &xi, lit(1e-6));
        (
            jac.view((0, 0), (nx, nx)).into_owned(),
            jac.view((0, nx), (nx, self.control_dim())).into_owned(),
        )
    }
}

/// Central-difference Jacobian of `f` at `at` with relative step `rel`.
pub fn finite_difference_jacobian<T: Real>(
    f: impl Fn(&DVector<T>) -> DVector<T>,
    at: &DVector<T>,
    rel: T,
) -> DMatrix<T> {
    let n = at.len();
    let mut columns = Vec::with_capacity(n);
    for i in 0..n {
        let h = rel * at[i].abs().max(T::one());
        let mut plus = at.clone();
        let mut minus = at.clone();
        plus[i] += h;
        minus[i] -= h;
        columns.push((f(&plus) - f(&minus)) / (h + h));
    }
    DMatrix::from_columns(&columns)
}

/// `c_t = (x − x_g)ᵀ W (x − x_g) + uᵀ R u`, `c_T = (x − x_g)ᵀ W_T (x − x_g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost<T: Real> {
    pub goal: DVector<T>,
    pub state_weight: DMatrix<T>,
    pub control_weight: DMatrix<T>,
    pub terminal_weight: DMatrix<T>,
}

impl<T: Real> QuadraticCost<T> {
    /// Validates shapes, symmetrizes, and checks `W, W_T ⪰ 0`, `R ≻ 0`.
    pub fn new(goal: DVector<T>, state_weight: DMatrix<T>, control_weight: DMatrix<T>, terminal_weight: DMatrix<T>) -> Result<Self> {
        let nx = goal.len();
        ensure_square(&state_weight, nx, "state weight W")?;
        ensure_square(&terminal_weight, nx, "terminal weight W_T")?;
        let nu = control_weight.nrows();
        ensure_square(&control_weight, nu, "control weight R")?;
        let tol = lit::<T>(-1e-12);
        let state_weight = symmetrize(&state_weight);
        let terminal_weight = symmetrize(&terminal_weight);
        let control_weight = symmetrize(&control_weight);
        if min_eigenvalue(&state_weight) < tol {
            return Err(Error::InvalidArgument("state weight W must be positive semidefinite".into()));
        }
        if min_eigenvalue(&terminal_weight) < tol {
            return Err(Error::InvalidArgument("terminal weight W_T must be positive semidefinite".into()));
        }
        if nu == 0 || min_eigenvalue(&control_weight) <= T::zero() {
            return Err(Error::InvalidArgument("control weight R must be positive definite".into()));
        }
        Ok(QuadraticCost {
            goal,
            state_weight,
            control_weight,
            terminal_weight,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.goal.len()
    }

    pub fn control_dim(&self) -> usize {
        self.control_weight.nrows()
    }

    pub fn stage_cost(&self, x: &DVector<T>, u: &DVector<T>) -> T {
        let d = x - &self.goal;
        (&self.state_weight * &d).dot(&d) + (&self.control_weight * u).dot(u)
    }

    pub fn terminal_cost(&self, x: &DVector<T>) -> T {
        let d = x - &self.goal;
        (&self.terminal_weight * &d).dot(&d)
    }

    /// Stage cost of a stacked `ξ = (x, u)`.
    pub fn stage_cost_joint(&self, xi: &DVector<T>) -> T {
        let nx = self.state_dim();
        let x = xi.rows(0, nx).into_owned();
        let u = xi.rows(nx, self.control_dim()).into_owned();
        self.stage_cost(&x, &u)
    }

    /// Exact second-order expansion of the stage cost about `(x, u)` in
    /// the stacked variable `ξ`.
    pub fn stage_expansion(&self, x: &DVector<T>, u: &DVector<T>) -> crate::quadrature::QuadraticModel<T> {
        let two = lit::<T>(2.0);
        let (nx, nu) = (self.state_dim(), self.control_dim());
        let gradient = crate::linalg::concat(&(&self.state_weight * (x - &self.goal) * two), &(&self.control_weight * u * two));
        let mut hessian = DMatrix::zeros(nx + nu, nx + nu);
        hessian.view_mut((0, 0), (nx, nx)).copy_from(&(&self.state_weight * two));
        hessian.view_mut((nx, nx), (nu, nu)).copy_from(&(&self.control_weight * two));
        crate::quadrature::QuadraticModel {
            reference: crate::linalg::concat(x, u),
            constant: self.stage_cost(x, u),
            gradient,
            hessian,
        }
    }

    /// Exact second-order expansion of the terminal cost about `x`.
    pub fn terminal_expansion(&self, x: &DVector<T>) -> crate::quadrature::QuadraticModel<T> {
        let two = lit::<T>(2.0);
        crate::quadrature::QuadraticModel {
            reference: x.clone(),
            constant: self.terminal_cost(x),
            gradient: &self.terminal_weight * (x - &self.goal) * two,
            hessian: &self.terminal_weight * two,
        }
    }
}

/// System, cost and initial-state distribution.
#[derive(Debug, Clone)]
pub struct ProblemInstance<T: Real> {
    pub system: SystemSpec<T>,
    pub cost: QuadraticCost<T>,
    pub initial_mean: DVector<T>,
    pub initial_covariance: DMatrix<T>,
}

impl<T: Real> ProblemInstance<T> {
    pub fn new(system: SystemSpec<T>, cost: QuadraticCost<T>, initial_mean: DVector<T>, initial_covariance: DMatrix<T>) -> Result<Self> {
        let nx = system.state_dim();
        ensure_len(&cost.goal, nx, "goal state")?;
        if cost.control_dim() != system.control_dim() {
            return Err(Error::Dimension {
                what: "control weight R",
                expected: system.control_dim(),
                found: cost.control_dim(),
            });
        }
        ensure_len(&initial_mean, nx, "initial state mean")?;
        ensure_square(&initial_covariance, nx, "initial state covariance")?;
        let initial_covariance = symmetrize(&initial_covariance);
        if nalgebra::Cholesky::new(initial_covariance.clone()).is_none() {
            return Err(Error::NotPositiveDefinite {
                what: "initial state covariance",
            });
        }
        Ok(ProblemInstance {
            system,
            cost,
            initial_mean,
            initial_covariance,
        })
    }

    pub fn horizon(&self) -> usize {
        self.system.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.system.control_dim()
    }
}

/// `Σ_t c_t(x_t, u_t) + c_T(x_T)` for `T + 1` states and `T` actions.
pub fn total_cost<T: Real>(instance: &ProblemInstance<T>, states: &[DVector<T>], actions: &[DVector<T>]) -> Result<T> {
    let horizon = instance.horizon();
    if actions.len() != horizon {
        return Err(Error::Dimension {
            what: "action trajectory length",
            expected: horizon,
            found: actions.len(),
        });
    }
    if states.len() != horizon + 1 {
        return Err(Error::Dimension {
            what: "state trajectory length",
            expected: horizon + 1,
            found: states.len(),
        });
    }
    let running = states
        .iter()
        .zip(actions)
        .fold(T::zero(), |acc, (x, u)| acc + instance.cost.stage_cost(x, u));
    Ok(running + instance.cost.terminal_cost(&states[horizon]))
}
