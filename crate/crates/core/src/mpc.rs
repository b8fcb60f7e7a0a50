//! Receding-horizon control by direct single shooting.
//!
//! The decision variables are the `N` inputs; states follow from rolling the
//! discrete model forward from the measured state, so the dynamics hold
//! exactly. Each iteration linearizes the rollout, forms the Gauss-Newton
//! model of the tracking cost
//!
//! ```text
//! J = Σ_{i=1}^{N-1} ‖x_i − r_i‖²_Q + ‖x_N − r_N‖²_P + Σ_{i=0}^{N-1} ‖u_i − u_ref‖²_R
//!     + μ Σ_i ‖violation of the optional state box at x_i‖²
//! ```
//!
//! and takes a Levenberg-Marquardt step restricted to the inputs that are not
//! pinned at a bound, followed by a projected backtracking line search.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{idx, ControlInput, ControlVector, QuadParams, QuadState, StateVector, CONTROL_DIM, STATE_DIM};
use crate::ensemble::{DiscreteEnsemble, EnsembleModel};
use crate::error::{Error, Result};

pub trait DiscreteModel {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    /// Next state with `∂x⁺/∂x` and `∂x⁺/∂u`.
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)>;
    /// Adjusts a reference state so it can be compared componentwise with `x`.
    fn align_reference(&self, _x: &DVector<f64>, _reference: &mut DVector<f64>) {}
}

/// `x⁺ = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearModel {
    /// Unit-mass double integrator with zero-order-hold input.
    pub fn double_integrator(dt: f64) -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]),
        }
    }
}

impl DiscreteModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u)
    }

    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.step(x, u)?, self.a.clone(), self.b.clone()))
    }
}

impl DiscreteModel for DiscreteEnsemble {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn control_dim(&self) -> usize {
        CONTROL_DIM
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let next = self.step_flat(&StateVector::from_column_slice(x.as_slice()), &ControlVector::from_column_slice(u.as_slice()))?;
        Ok(DVector::from_column_slice(next.as_slice()))
    }

    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let (next, a, b) = self.step_with_jacobian(
            &StateVector::from_column_slice(x.as_slice()),
            &ControlVector::from_column_slice(u.as_slice()),
        )?;
        Ok((
            DVector::from_column_slice(next.as_slice()),
            DMatrix::from_column_slice(STATE_DIM, STATE_DIM, a.as_slice()),
            DMatrix::from_column_slice(STATE_DIM, CONTROL_DIM, b.as_slice()),
        ))
    }

    /// Shortest-arc sign for the quaternion block.
    fn align_reference(&self, x: &DVector<f64>, reference: &mut DVector<f64>) {
        let dot: f64 = (0..4).map(|k| x[idx::QUAT + k] * reference[idx::QUAT + k]).sum();
        if dot < 0.0 {
            for k in 0..4 {
                reference[idx::QUAT + k] = -reference[idx::QUAT + k];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpConfig {
    pub horizon: usize,
    pub dt: f64,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub state_lower: Option<DVector<f64>>,
    pub state_upper: Option<DVector<f64>>,
    pub penalty_mu: f64,
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
}

impl OcpConfig {
    /// Unbounded problem with the default termination rule.
    pub fn unconstrained(horizon: usize, dt: f64, q: DMatrix<f64>, r: DMatrix<f64>, p: DMatrix<f64>) -> Self {
        let nu = r.nrows();
        Self {
            horizon,
            dt,
            q,
            r,
            p,
            u_min: DVector::from_element(nu, f64::NEG_INFINITY),
            u_max: DVector::from_element(nu, f64::INFINITY),
            state_lower: None,
            state_upper: None,
            penalty_mu: 0.0,
            max_iterations: 50,
            gradient_tol: 1e-6,
            step_tol: 1e-9,
        }
    }

    pub fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("mpc.horizon", "must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("mpc.dt_mpc_s", "must be positive"));
        }
        let square = |m: &DMatrix<f64>, n: usize, name: &str| -> Result<()> {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::config(name, format!("must be {n}x{n}")));
            }
            if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                return Err(Error::config(name, "must be symmetric"));
            }
            Ok(())
        };
        square(&self.q, nx, "mpc.q")?;
        square(&self.p, nx, "mpc.p")?;
        square(&self.r, nu, "mpc.r")?;
        for (m, name) in [(&self.q, "mpc.q"), (&self.p, "mpc.p")] {
            if m.symmetric_eigenvalues().min() < -1e-12 * (1.0 + m.amax()) {
                return Err(Error::config(name, "must be positive semidefinite"));
            }
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::config("mpc.r", "must be positive definite"));
        }
        if self.u_min.len() != nu || self.u_max.len() != nu {
            return Err(Error::config("mpc.input_bounds", format!("need {nu} entries")));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| lo > hi) {
            return Err(Error::config("mpc.input_bounds", "lower bound exceeds upper bound"));
        }
        for (b, name) in [(&self.state_lower, "mpc.state_lower"), (&self.state_upper, "mpc.state_upper")] {
            if let Some(b) = b {
                if b.len() != nx {
                    return Err(Error::config(name, format!("need {nx} entries")));
                }
            }
        }
        if !(self.penalty_mu >= 0.0) {
            return Err(Error::config("mpc.penalty_mu", "must be non-negative"));
        }
        Ok(())
    }
}

/// Reference states `r_0 … r_N` and the input the cost pulls toward.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub states: Vec<DVector<f64>>,
    pub control: DVector<f64>,
}

impl ReferenceWindow {
    pub fn constant(state: DVector<f64>, control: DVector<f64>, horizon: usize) -> Self {
        Self {
            states: vec![state; horizon + 1],
            control,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub controls: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl OcpSolution {
    pub fn first_control(&self) -> &DVector<f64> {
        &self.controls[0]
    }
}

/// Shift left by one step and repeat the last input.
pub fn shift_warm_start(prev: &OcpSolution) -> WarmStart {
    let mut controls: Vec<DVector<f64>> = prev.controls.iter().skip(1).cloned().collect();
    if let Some(last) = prev.controls.last() {
        controls.push(last.clone());
    }
    WarmStart { controls }
}

struct Problem<'a, M: DiscreteModel> {
    model: &'a M,
    x0: &'a DVector<f64>,
    reference: &'a ReferenceWindow,
    cfg: &'a OcpConfig,
}

impl<M: DiscreteModel> Problem<'_, M> {
    fn rollout(&self, controls: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(self.x0.clone());
        for (i, u) in controls.iter().enumerate() {
            let next = self.model.step(&states[i], u)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::RolloutDiverged { step: i + 1 });
            }
            states.push(next);
        }
        Ok(states)
    }

    fn weight(&self, i: usize) -> &DMatrix<f64> {
        if i == self.cfg.horizon {
            &self.cfg.p
        } else {
            &self.cfg.q
        }
    }

    fn state_error(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut r = self.reference.states[i].clone();
        self.model.align_reference(x, &mut r);
        x - r
    }

    /// Positive parts of the box violations (signed), zero inside the box.
    fn violation(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(x.len());
        if self.cfg.penalty_mu == 0.0 {
            return v;
        }
        if let Some(lo) = &self.cfg.state_lower {
            for k in 0..x.len() {
                if x[k] < lo[k] {
                    v[k] = x[k] - lo[k];
                }
            }
        }
        if let Some(hi) = &self.cfg.state_upper {
            for k in 0..x.len() {
                if x[k] > hi[k] {
                    v[k] = x[k] - hi[k];
                }
            }
        }
        v
    }

    fn cost(&self, states: &[DVector<f64>], controls: &[DVector<f64>]) -> f64 {
        let mut j = 0.0;
        for (i, x) in states.iter().enumerate().skip(1) {
            let e = self.state_error(i, x);
            j += e.dot(&(self.weight(i) * &e));
            if self.cfg.penalty_mu > 0.0 {
                j += self.cfg.penalty_mu * self.violation(x).norm_squared();
            }
        }
        for u in controls {
            let du = u - &self.reference.control;
            j += du.dot(&(&self.cfg.r * &du));
        }
        j
    }

    /// Gradient and Gauss-Newton Hessian of the cost over the stacked inputs.
    fn gauss_newton(&self, states: &[DVector<f64>], controls: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.cfg.horizon;
        let nx = self.model.state_dim();
        let nu = self.model.control_dim();
        let dim = n * nu;
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);

        for (i, u) in controls.iter().enumerate() {
            let du = u - &self.reference.control;
            let g = &self.cfg.r * du * 2.0;
            grad.rows_mut(i * nu, nu).copy_from(&g);
            hess.view_mut((i * nu, i * nu), (nu, nu)).copy_from(&(&self.cfg.r * 2.0));
        }

        // sens = ∂x_i/∂(u_0 … u_{i-1}), nx × (i·nu)
        let mut sens = DMatrix::<f64>::zeros(nx, 0);
        for i in 0..n {
            let (_, a, b) = self.model.linearize(&states[i], &controls[i])?;
            let mut next = DMatrix::zeros(nx, (i + 1) * nu);
            if i > 0 {
                next.columns_mut(0, i * nu).copy_from(&(&a * &sens));
            }
            next.columns_mut(i * nu, nu).copy_from(&b);
            sens = next;

            let x = &states[i + 1];
            let e = self.state_error(i + 1, x);
            let mut w = self.weight(i + 1).clone();
            let mut we = &w * &e;
            if self.cfg.penalty_mu > 0.0 {
                let v = self.violation(x);
                for k in 0..nx {
                    if v[k] != 0.0 {
                        w[(k, k)] += self.cfg.penalty_mu;
                        we[k] += self.cfg.penalty_mu * v[k];
                    }
                }
            }
            let cols = (i + 1) * nu;
            let g = sens.tr_mul(&we) * 2.0;
            let mut gr = grad.rows_mut(0, cols);
            gr += g;
            let ws = &w * &sens;
            let h = sens.tr_mul(&ws) * 2.0;
            let mut hv = hess.view_mut((0, 0), (cols, cols));
            hv += h;
        }
        Ok((grad, hess))
    }
}

fn flatten(controls: &[DVector<f64>]) -> DVector<f64> {
    let nu = controls.first().map_or(0, |u| u.len());
    let mut v = DVector::zeros(controls.len() * nu);
    for (i, u) in controls.iter().enumerate() {
        v.rows_mut(i * nu, nu).copy_from(u);
    }
    v
}

fn unflatten(v: &DVector<f64>, nu: usize) -> Vec<DVector<f64>> {
    (0..v.len() / nu).map(|i| v.rows(i * nu, nu).into_owned()).collect()
}

fn project(v: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    let nu = lo.len();
    for (k, x) in v.iter_mut().enumerate() {
        *x = x.clamp(lo[k % nu], hi[k % nu]);
    }
}

pub fn solve_ocp<M: DiscreteModel>(
    model: &M,
    x0: &DVector<f64>,
    reference: &ReferenceWindow,
    cfg: &OcpConfig,
    warm: Option<&WarmStart>,
) -> Result<OcpSolution> {
    let nx = model.state_dim();
    let nu = model.control_dim();
    cfg.validate(nx, nu)?;
    if x0.len() != nx {
        return Err(Error::Dimension {
            context: "initial state".into(),
            expected: nx,
            got: x0.len(),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("initial state"));
    }
    if reference.states.len() != cfg.horizon + 1 || reference.control.len() != nu {
        return Err(Error::Dimension {
            context: "reference window".into(),
            expected: cfg.horizon + 1,
            got: reference.states.len(),
        });
    }

    let n = cfg.horizon;
    let initial: Vec<DVector<f64>> = match warm {
        Some(w) if w.controls.len() == n && w.controls.iter().all(|u| u.len() == nu) => w.controls.clone(),
        _ => vec![reference.control.clone(); n],
    };
    let mut u = flatten(&initial);
    project(&mut u, &cfg.u_min, &cfg.u_max);

    let prob = Problem {
        model,
        x0,
        reference,
        cfg,
    };
    let mut controls = unflatten(&u, nu);
    let mut states = prob.rollout(&controls)?;
    let mut cost = prob.cost(&states, &controls);
    let mut lambda = 1e-6;
    let mut iterations = 0;
    let mut converged = false;
    let lo = &cfg.u_min;
    let hi = &cfg.u_max;

    while iterations < cfg.max_iterations {
        let (grad, hess) = prob.gauss_newton(&states, &controls)?;

        // inputs pinned at a bound with the gradient pushing outward stay fixed
        let free: Vec<usize> = (0..u.len())
            .filter(|&k| {
                let (l, h) = (lo[k % nu], hi[k % nu]);
                !((u[k] <= l && grad[k] > 0.0) || (u[k] >= h && grad[k] < 0.0))
            })
            .collect();
        let pg_norm = free.iter().map(|&k| grad[k].abs()).fold(0.0, f64::max);
        if pg_norm < cfg.gradient_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let nf = free.len();
        let hff = DMatrix::from_fn(nf, nf, |a, b| hess[(free[a], free[b])]);
        let gf = DVector::from_fn(nf, |a, _| grad[free[a]]);
        let mut accepted = None;
        while lambda <= 1e10 {
            let mut damped = hff.clone();
            for k in 0..nf {
                damped[(k, k)] += lambda * (hff[(k, k)].abs() + 1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let df = chol.solve(&(-&gf));
            let mut dir = DVector::zeros(u.len());
            for (a, &k) in free.iter().enumerate() {
                dir[k] = df[a];
            }
            let mut alpha = 1.0;
            while alpha >= 1e-4 {
                let mut trial = &u + &dir * alpha;
                project(&mut trial, lo, hi);
                let step = &trial - &u;
                let trial_controls = unflatten(&trial, nu);
                let trial_cost = match prob.rollout(&trial_controls) {
                    Ok(s) => Some((prob.cost(&s, &trial_controls), s)),
                    Err(Error::RolloutDiverged { .. }) | Err(Error::NonFinite { .. }) => None,
                    Err(e) => return Err(e),
                };
                if let Some((c, s)) = trial_cost {
                    if c.is_finite() && c < cost && c <= cost + 1e-4 * grad.dot(&step) {
                        accepted = Some((trial, trial_controls, s, c, step.amax()));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                lambda = (lambda * 0.1).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        let Some((nu_vec, nc, ns, ncost, step_norm)) = accepted else {
            // no descent possible: the current iterate is the best available
            break;
        };
        u = nu_vec;
        controls = nc;
        states = ns;
        cost = ncost;
        if step_norm < cfg.step_tol {
            converged = true;
            break;
        }
    }

    Ok(OcpSolution {
        states,
        controls,
        cost,
        iterations,
        converged,
    })
}

/// Anything that yields a reference state at a time.
pub trait ReferenceSource {
    fn reference_state(&self, t: f64) -> StateVector;
}

impl<F: Fn(f64) -> StateVector> ReferenceSource for F {
    fn reference_state(&self, t: f64) -> StateVector {
        self(t)
    }
}

/// Weights and limits of the quadrotor tracking problem as they appear in the
/// experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSettings {
    pub horizon: usize,
    pub dt_mpc_s: f64,
    pub q_position: f64,
    pub q_velocity: f64,
    pub q_attitude: f64,
    pub q_rate: f64,
    pub r_thrust: f64,
    pub r_moment: f64,
    pub terminal_scale: f64,
    pub penalty_mu: f64,
    pub max_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_upper: Option<Vec<f64>>,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt_mpc_s: 0.02,
            q_position: 40.0,
            q_velocity: 4.0,
            q_attitude: 1.0,
            q_rate: 0.1,
            r_thrust: 0.5,
            r_moment: 20.0,
            terminal_scale: 5.0,
            penalty_mu: 0.0,
            max_iterations: 50,
            state_lower: None,
            state_upper: None,
        }
    }
}

impl MpcSettings {
    pub fn ocp_config(&self, params: &QuadParams) -> Result<OcpConfig> {
        let mut qd = DVector::zeros(STATE_DIM);
        for k in 0..3 {
            qd[idx::POS + k] = self.q_position;
            qd[idx::VEL + k] = self.q_velocity;
            qd[idx::RATE + k] = self.q_rate;
        }
        for k in 0..4 {
            qd[idx::QUAT + k] = self.q_attitude;
        }
        let q = DMatrix::from_diagonal(&qd);
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![
            self.r_thrust,
            self.r_moment,
            self.r_moment,
            self.r_moment,
        ]));
        let p = &q * self.terminal_scale;
        let (lo, hi) = params.control_bounds();
        let bound = |v: &Option<Vec<f64>>| v.as_ref().map(|b| DVector::from_column_slice(b));
        let cfg = OcpConfig {
            horizon: self.horizon,
            dt: self.dt_mpc_s,
            q,
            r,
            p,
            u_min: DVector::from_column_slice(lo.as_slice()),
            u_max: DVector::from_column_slice(hi.as_slice()),
            state_lower: bound(&self.state_lower),
            state_upper: bound(&self.state_upper),
            penalty_mu: self.penalty_mu,
            max_iterations: self.max_iterations,
            gradient_tol: 1e-6,
            step_tol: 1e-9,
        };
        cfg.validate(STATE_DIM, CONTROL_DIM)?;
        Ok(cfg)
    }
}

/// Reference window sampled at `t, t + dt, …, t + N·dt` with the nominal
/// hover input as the control reference.
pub fn reference_window(traj: &dyn ReferenceSource, t: f64, cfg: &OcpConfig, params: &QuadParams) -> ReferenceWindow {
    ReferenceWindow {
        states: (0..=cfg.horizon)
            .map(|i| {
                let r = traj.reference_state(t + i as f64 * cfg.dt);
                DVector::from_column_slice(r.as_slice())
            })
            .collect(),
        control: DVector::from_column_slice(params.hover_control().as_slice()),
    }
}

/// One receding-horizon step: discretize the snapshot, solve, and return the
/// first input of the optimal sequence.
pub fn control_step(
    model: &Arc<EnsembleModel>,
    x: &QuadState,
    t: f64,
    traj: &dyn ReferenceSource,
    cfg: &OcpConfig,
    warm: Option<&WarmStart>,
) -> Result<(ControlInput, OcpSolution)> {
    let discrete = model.discretize(cfg.dt)?;
    let window = reference_window(traj, t, cfg, model.nominal());
    let x0 = DVector::from_column_slice(x.to_vector().as_slice());
    let sol = solve_ocp(&discrete, &x0, &window, cfg, warm)?;
    let u0 = ControlVector::from_column_slice(sol.first_control().as_slice());
    Ok((ControlInput::from_vector(&u0), sol))
}
