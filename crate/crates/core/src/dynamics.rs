//! Rigid-body quadrotor model.
//!
//! State layout (13): position `r` (world, m), velocity `v` (world, m/s),
//! attitude quaternion `q = (w, x, y, z)` rotating body into world, body
//! angular rate `ω` (rad/s). Control layout (4): collective thrust `η` (N)
//! along body +z and body moments `τ` (N·m).
//!
//! ```text
//! ṙ = v
//! v̇ = g + R(q)·(0, 0, η)ᵀ / m
//! q̇ = ½ q ⊗ (0, ω)
//! ω̇ = I⁻¹(τ − ω × Iω)
//! ```

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4};

use crate::error::{ensure_finite, Error, Result};

pub const STATE_DIM: usize = 13;
pub const CONTROL_DIM: usize = 4;
pub const AUGMENTED_DIM: usize = STATE_DIM + CONTROL_DIM;

pub const STANDARD_GRAVITY: f64 = 9.81;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type ControlVector = SVector<f64, CONTROL_DIM>;
pub type AugmentedVector = SVector<f64, AUGMENTED_DIM>;
pub type StateJacobian = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type ControlJacobian = SMatrix<f64, STATE_DIM, CONTROL_DIM>;

/// Offsets of the blocks inside a flat state vector.
pub mod idx {
    pub const POS: usize = 0;
    pub const VEL: usize = 3;
    pub const QUAT: usize = 6;
    pub const RATE: usize = 10;
}

const MIN_QUAT_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Unit quaternion stored as (w, x, y, z).
    pub attitude: Vector4<f64>,
    pub body_rate: Vector3<f64>,
}

impl Default for QuadState {
    fn default() -> Self {
        Self::hover_at(Vector3::zeros())
    }
}

impl QuadState {
    pub fn hover_at(position: Vector3<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: Vector4::new(1.0, 0.0, 0.0, 0.0),
            body_rate: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v.fixed_rows_mut::<3>(idx::POS).copy_from(&self.position);
        v.fixed_rows_mut::<3>(idx::VEL).copy_from(&self.velocity);
        v.fixed_rows_mut::<4>(idx::QUAT).copy_from(&self.attitude);
        v.fixed_rows_mut::<3>(idx::RATE).copy_from(&self.body_rate);
        v
    }

    pub fn from_vector(v: &StateVector) -> Self {
        Self {
            position: v.fixed_rows::<3>(idx::POS).into_owned(),
            velocity: v.fixed_rows::<3>(idx::VEL).into_owned(),
            attitude: v.fixed_rows::<4>(idx::QUAT).into_owned(),
            body_rate: v.fixed_rows::<3>(idx::RATE).into_owned(),
        }
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        if s.len() != STATE_DIM {
            return Err(Error::Dimension {
                context: "QuadState::from_slice".into(),
                expected: STATE_DIM,
                got: s.len(),
            });
        }
        Ok(Self::from_vector(&StateVector::from_column_slice(s)))
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    /// Collective thrust along body +z, N.
    pub thrust: f64,
    /// Body moments, N·m.
    pub moments: Vector3<f64>,
}

impl ControlInput {
    pub fn new(thrust: f64, moments: Vector3<f64>) -> Self {
        Self { thrust, moments }
    }

    pub fn to_vector(&self) -> ControlVector {
        ControlVector::new(self.thrust, self.moments.x, self.moments.y, self.moments.z)
    }

    pub fn from_vector(v: &ControlVector) -> Self {
        Self {
            thrust: v[0],
            moments: Vector3::new(v[1], v[2], v[3]),
        }
    }
}

/// Concatenation `z = [x, u]` fed to the residual networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState(pub AugmentedVector);

impl AugmentedState {
    pub fn new(x: &StateVector, u: &ControlVector) -> Self {
        let mut z = AugmentedVector::zeros();
        z.fixed_rows_mut::<STATE_DIM>(0).copy_from(x);
        z.fixed_rows_mut::<CONTROL_DIM>(STATE_DIM).copy_from(u);
        Self(z)
    }

    pub fn from_parts(x: &QuadState, u: &ControlInput) -> Self {
        Self::new(&x.to_vector(), &u.to_vector())
    }

    pub fn state(&self) -> StateVector {
        self.0.fixed_rows::<STATE_DIM>(0).into_owned()
    }

    pub fn control(&self) -> ControlVector {
        self.0.fixed_rows::<CONTROL_DIM>(STATE_DIM).into_owned()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadParams {
    mass: f64,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
    gravity: Vector3<f64>,
    /// Per-axis moment magnitude cap, N·m.
    moment_max: Vector3<f64>,
    /// Upper thrust bound as a multiple of the nominal hover thrust.
    thrust_max_factor: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self::new(
            0.032,
            Matrix3::from_diagonal(&Vector3::new(1.4e-5, 1.4e-5, 2.2e-5)),
            Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
        )
        .expect("default quadrotor parameters are valid")
    }
}

impl QuadParams {
    pub fn new(mass: f64, inertia: Matrix3<f64>, gravity: Vector3<f64>) -> Result<Self> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::config("mass_kg", "must be positive"));
        }
        if (inertia - inertia.transpose()).abs().max() > 1e-15 {
            return Err(Error::config("inertia_kg_m2", "must be symmetric"));
        }
        if inertia.cholesky().is_none() {
            return Err(Error::config("inertia_kg_m2", "must be positive definite"));
        }
        ensure_finite(gravity.as_slice(), "gravity")?;
        let inertia_inv = inertia
            .try_inverse()
            .ok_or_else(|| Error::config("inertia_kg_m2", "not invertible"))?;
        Ok(Self {
            mass,
            inertia,
            inertia_inv,
            gravity,
            moment_max: Vector3::new(2e-3, 2e-3, 2e-3),
            thrust_max_factor: 2.0,
        })
    }

    pub fn with_control_limits(mut self, thrust_max_factor: f64, moment_max: Vector3<f64>) -> Result<Self> {
        if !(thrust_max_factor > 0.0) {
            return Err(Error::config("thrust_max_hover_ratio", "must be positive"));
        }
        if moment_max.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::config("moment_max_n_m", "must be positive"));
        }
        self.thrust_max_factor = thrust_max_factor;
        self.moment_max = moment_max;
        Ok(self)
    }

    /// Same vehicle with a different mass; inertia and limits unchanged.
    pub fn with_mass(&self, mass: f64) -> Result<Self> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::config("mass_kg", "must be positive"));
        }
        Ok(Self { mass, ..self.clone() })
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn inertia(&self) -> &Matrix3<f64> {
        &self.inertia
    }

    pub fn gravity(&self) -> &Vector3<f64> {
        &self.gravity
    }

    pub fn moment_max(&self) -> &Vector3<f64> {
        &self.moment_max
    }

    pub fn thrust_max_factor(&self) -> f64 {
        self.thrust_max_factor
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity.norm()
    }

    pub fn hover_control(&self) -> ControlVector {
        ControlVector::new(self.hover_thrust(), 0.0, 0.0, 0.0)
    }

    /// Input box `η ∈ [0, k·m·g]`, `|τᵢ| ≤ τmax,ᵢ`.
    pub fn control_bounds(&self) -> (ControlVector, ControlVector) {
        let m = &self.moment_max;
        (
            ControlVector::new(0.0, -m.x, -m.y, -m.z),
            ControlVector::new(self.thrust_max_factor * self.hover_thrust(), m.x, m.y, m.z),
        )
    }
}

/// Body z-axis expressed in world coordinates, `R(q)·e₃`.
fn thrust_axis(q: &Vector4<f64>) -> Vector3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Vector3::new(
        2.0 * (x * z + w * y),
        2.0 * (y * z - w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn rotation_from_quaternion(q: &Vector4<f64>) -> Result<Matrix3<f64>> {
    ensure_finite(q.as_slice(), "quaternion")?;
    let n = q.norm();
    if n < MIN_QUAT_NORM {
        return Err(Error::DegenerateQuaternion { norm: n });
    }
    let q = q / n;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Unchecked derivative on flat vectors. `mass` overrides the parameter set's
/// mass so the plant can apply its schedule without cloning parameters.
pub(crate) fn derivative_with_mass(
    x: &StateVector,
    u: &ControlVector,
    mass: f64,
    p: &QuadParams,
) -> StateVector {
    let q = x.fixed_rows::<4>(idx::QUAT);
    let q = Vector4::new(q[0], q[1], q[2], q[3]);
    let w = Vector3::new(x[idx::RATE], x[idx::RATE + 1], x[idx::RATE + 2]);
    let tau = Vector3::new(u[1], u[2], u[3]);

    let acc = p.gravity + thrust_axis(&q) * (u[0] / mass);
    let qdot = 0.5
        * Vector4::new(
            -q[1] * w.x - q[2] * w.y - q[3] * w.z,
            q[0] * w.x + q[2] * w.z - q[3] * w.y,
            q[0] * w.y + q[3] * w.x - q[1] * w.z,
            q[0] * w.z + q[1] * w.y - q[2] * w.x,
        );
    let wdot = p.inertia_inv * (tau - w.cross(&(p.inertia * w)));

    let mut d = StateVector::zeros();
    d.fixed_rows_mut::<3>(idx::POS)
        .copy_from(&x.fixed_rows::<3>(idx::VEL));
    d.fixed_rows_mut::<3>(idx::VEL).copy_from(&acc);
    d.fixed_rows_mut::<4>(idx::QUAT).copy_from(&qdot);
    d.fixed_rows_mut::<3>(idx::RATE).copy_from(&wdot);
    d
}

pub(crate) fn derivative_flat(x: &StateVector, u: &ControlVector, p: &QuadParams) -> StateVector {
    derivative_with_mass(x, u, p.mass, p)
}

pub fn nominal_derivative(x: &QuadState, u: &ControlInput, p: &QuadParams) -> Result<StateVector> {
    let xv = x.to_vector();
    let uv = u.to_vector();
    ensure_finite(xv.as_slice(), "state")?;
    ensure_finite(uv.as_slice(), "control")?;
    let d = derivative_flat(&xv, &uv, p);
    ensure_finite(d.as_slice(), "state derivative")?;
    Ok(d)
}

fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Partial derivatives of the nominal derivative with respect to state and
/// control, evaluated at `(x, u)`.
pub fn nominal_jacobian(x: &StateVector, u: &ControlVector, p: &QuadParams) -> (StateJacobian, ControlJacobian) {
    let (qw, qx, qy, qz) = (x[idx::QUAT], x[idx::QUAT + 1], x[idx::QUAT + 2], x[idx::QUAT + 3]);
    let w = Vector3::new(x[idx::RATE], x[idx::RATE + 1], x[idx::RATE + 2]);
    let s = u[0] / p.mass;

    let mut fx = StateJacobian::zeros();
    let mut fu = ControlJacobian::zeros();

    for i in 0..3 {
        fx[(idx::POS + i, idx::VEL + i)] = 1.0;
    }

    // ∂(R e₃)/∂q, columns ordered (w, x, y, z)
    let dc = SMatrix::<f64, 3, 4>::new(
        2.0 * qy, 2.0 * qz, 2.0 * qw, 2.0 * qx,
        -2.0 * qx, -2.0 * qw, 2.0 * qz, 2.0 * qy,
        0.0, -4.0 * qx, -4.0 * qy, 0.0,
    );
    fx.fixed_view_mut::<3, 4>(idx::VEL, idx::QUAT).copy_from(&(dc * s));
    let axis = thrust_axis(&Vector4::new(qw, qx, qy, qz));
    fu.fixed_view_mut::<3, 1>(idx::VEL, 0).copy_from(&(axis / p.mass));

    let omega = SMatrix::<f64, 4, 4>::new(
        0.0, -w.x, -w.y, -w.z,
        w.x, 0.0, w.z, -w.y,
        w.y, -w.z, 0.0, w.x,
        w.z, w.y, -w.x, 0.0,
    );
    fx.fixed_view_mut::<4, 4>(idx::QUAT, idx::QUAT).copy_from(&(omega * 0.5));
    let xi = SMatrix::<f64, 4, 3>::new(
        -qx, -qy, -qz,
        qw, -qz, qy,
        qz, qw, -qx,
        -qy, qx, qw,
    );
    fx.fixed_view_mut::<4, 3>(idx::QUAT, idx::RATE).copy_from(&(xi * 0.5));

    let iw = p.inertia * w;
    let dgyro = skew(&w) * p.inertia - skew(&iw);
    fx.fixed_view_mut::<3, 3>(idx::RATE, idx::RATE)
        .copy_from(&(-(p.inertia_inv * dgyro)));
    fu.fixed_view_mut::<3, 3>(idx::RATE, 1).copy_from(&p.inertia_inv);

    (fx, fu)
}

/// Classical four-stage Runge-Kutta step of `ż = f(t, z)`.
pub fn rk4_step<const N: usize, F>(mut f: F, z0: &SVector<f64, N>, t0: f64, dt: f64) -> Result<SVector<f64, N>>
where
    F: FnMut(f64, &SVector<f64, N>) -> SVector<f64, N>,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("rk4 step size must be positive, got {dt}")));
    }
    let check = |k: &SVector<f64, N>, stage: &str| ensure_finite(k.as_slice(), stage);
    let h2 = 0.5 * dt;
    let k1 = f(t0, z0);
    check(&k1, "rk4 stage k1")?;
    let k2 = f(t0 + h2, &(z0 + k1 * h2));
    check(&k2, "rk4 stage k2")?;
    let k3 = f(t0 + h2, &(z0 + k2 * h2));
    check(&k3, "rk4 stage k3")?;
    let k4 = f(t0 + dt, &(z0 + k3 * dt));
    check(&k4, "rk4 stage k4")?;
    let z1 = z0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    check(&z1, "rk4 update")?;
    Ok(z1)
}

/// Rescales the quaternion block of a flat state in place.
pub(crate) fn normalize_attitude(x: &mut StateVector) -> Result<()> {
    let n = x.fixed_rows::<4>(idx::QUAT).norm();
    if !(n >= MIN_QUAT_NORM) {
        return Err(Error::DegenerateQuaternion { norm: n });
    }
    x.fixed_rows_mut::<4>(idx::QUAT).unscale_mut(n);
    Ok(())
}

pub fn normalize_quaternion(x: &QuadState) -> Result<QuadState> {
    let n = x.attitude.norm();
    if !(n >= MIN_QUAT_NORM) {
        return Err(Error::DegenerateQuaternion { norm: n });
    }
    Ok(QuadState {
        attitude: x.attitude / n,
        ..*x
    })
}
