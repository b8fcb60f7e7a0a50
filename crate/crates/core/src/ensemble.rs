//! Hybrid dynamics: the nominal rigid-body model plus a bounded FIFO queue of
//! residual networks whose outputs are added with exponential forgetting
//! weights.
//!
//! ```text
//! f̂(x, u) = f̃(x, u) + Σₖ e^{-ageₖ} · netₖ([x, u])
//! ```
//!
//! `age = 0` is the newest member. While the queue fills this reproduces the
//! insertion-time weights `e^{i+1-p}`; once members start being evicted every
//! survivor is re-weighted by its current age.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{Matrix4, SMatrix, Vector4};

use crate::dynamics::{
    derivative_flat, idx, nominal_jacobian, normalize_attitude, rk4_step, AugmentedState, ControlJacobian,
    ControlVector, QuadParams, QuadState, StateJacobian, StateVector, AUGMENTED_DIM, STATE_DIM,
};
use crate::error::{ensure_finite, Error, Result};
use crate::mlp::{ForwardCache, Mlp};

pub const DEFAULT_LAYER_DIMS: [usize; 4] = [17, 32, 32, 13];

pub fn forgetting_weight(age: usize) -> f64 {
    (-(age as f64)).exp()
}

/// Evaluates one residual network on an augmented state.
pub fn member_forward(net: &Mlp, z: &AugmentedState) -> Result<StateVector> {
    if net.input_dim() != AUGMENTED_DIM || net.output_dim() != STATE_DIM {
        return Err(Error::Dimension {
            context: format!("residual network {:?}", net.dims()),
            expected: AUGMENTED_DIM,
            got: net.input_dim(),
        });
    }
    ensure_finite(z.as_slice(), "augmented state")?;
    let out = net.forward(z.as_slice())?;
    Ok(StateVector::from_column_slice(&out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    nominal: QuadParams,
    capacity: usize,
    layer_dims: Vec<usize>,
    /// Oldest first.
    members: VecDeque<Arc<Mlp>>,
    version: u64,
}

impl EnsembleModel {
    pub fn new(nominal: QuadParams, capacity: usize, layer_dims: &[usize]) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("ensemble.capacity", "queue capacity must be at least 1"));
        }
        if layer_dims.len() < 2 || layer_dims[0] != AUGMENTED_DIM || *layer_dims.last().unwrap() != STATE_DIM {
            return Err(Error::config(
                "ensemble.layer_dims",
                format!("must start at {AUGMENTED_DIM} and end at {STATE_DIM}, got {layer_dims:?}"),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::config("ensemble.layer_dims", "layer widths must be positive"));
        }
        Ok(Self {
            nominal,
            capacity,
            layer_dims: layer_dims.to_vec(),
            members: VecDeque::with_capacity(capacity),
            version: 0,
        })
    }

    /// Rebuilds a snapshot from stored parts (checkpoint loading).
    pub fn from_parts(
        nominal: QuadParams,
        capacity: usize,
        layer_dims: &[usize],
        members: Vec<Mlp>,
        version: u64,
    ) -> Result<Self> {
        let mut model = Self::new(nominal, capacity, layer_dims)?;
        if members.len() > capacity {
            return Err(Error::InvalidArgument(format!(
                "{} members exceed queue capacity {capacity}",
                members.len()
            )));
        }
        for m in members {
            model.check_member(&m)?;
            model.members.push_back(Arc::new(m));
        }
        model.version = version;
        Ok(model)
    }

    fn check_member(&self, net: &Mlp) -> Result<()> {
        if net.dims() != self.layer_dims.as_slice() {
            return Err(Error::Dimension {
                context: format!("member layout {:?} vs ensemble {:?}", net.dims(), self.layer_dims),
                expected: crate::mlp::param_count(&self.layer_dims),
                got: net.num_params(),
            });
        }
        Ok(())
    }

    pub fn nominal(&self) -> &QuadParams {
        &self.nominal
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Members from oldest to newest.
    pub fn members(&self) -> impl ExactSizeIterator<Item = &Mlp> + DoubleEndedIterator {
        self.members.iter().map(|m| m.as_ref())
    }

    pub fn newest(&self) -> Option<&Mlp> {
        self.members.back().map(|m| m.as_ref())
    }

    /// Ages aligned with [`members`](Self::members): oldest has the largest age.
    pub fn ages(&self) -> Vec<usize> {
        let n = self.members.len();
        (0..n).map(|i| n - 1 - i).collect()
    }

    /// Weights aligned with [`members`](Self::members).
    pub fn weights(&self) -> Vec<f64> {
        self.ages().into_iter().map(forgetting_weight).collect()
    }

    /// New snapshot with `net` appended as the newest member. The oldest is
    /// evicted when the queue would exceed its capacity.
    pub fn push_member(&self, net: Mlp) -> Result<Self> {
        self.check_member(&net)?;
        let mut next = self.clone();
        next.members.push_back(Arc::new(net));
        while next.members.len() > next.capacity {
            next.members.pop_front();
        }
        next.version += 1;
        Ok(next)
    }

    /// Same snapshot with the newest member replaced. Used by the trainer,
    /// which pushes once and then refines only that member.
    pub(crate) fn with_newest_replaced(&self, net: Mlp) -> Result<Self> {
        self.check_member(&net)?;
        let mut next = self.clone();
        match next.members.back_mut() {
            Some(slot) => *slot = Arc::new(net),
            None => return Err(Error::EmptyEnsemble),
        }
        Ok(next)
    }

    pub fn hybrid_derivative(&self, z: &AugmentedState) -> Result<StateVector> {
        ensure_finite(z.as_slice(), "augmented state")?;
        let d = self.derivative(&z.state(), &z.control());
        ensure_finite(d.as_slice(), "hybrid derivative")?;
        Ok(d)
    }

    pub(crate) fn derivative(&self, x: &StateVector, u: &ControlVector) -> StateVector {
        let mut d = derivative_flat(x, u, &self.nominal);
        if self.members.is_empty() {
            return d;
        }
        let z = AugmentedState::new(x, u);
        let mut cache = ForwardCache::default();
        let n = self.members.len();
        for (i, net) in self.members.iter().enumerate() {
            net.forward_cached(z.as_slice(), &mut cache);
            let w = forgetting_weight(n - 1 - i);
            for (di, o) in d.iter_mut().zip(cache.output()) {
                *di += w * o;
            }
        }
        d
    }

    /// Derivative together with its state and control Jacobians.
    pub(crate) fn derivative_with_jacobian(
        &self,
        x: &StateVector,
        u: &ControlVector,
    ) -> (StateVector, StateJacobian, ControlJacobian) {
        let mut d = derivative_flat(x, u, &self.nominal);
        let (mut fx, mut fu) = nominal_jacobian(x, u, &self.nominal);
        if !self.members.is_empty() {
            let z = AugmentedState::new(x, u);
            let mut cache = ForwardCache::default();
            let mut jac = vec![0.0; STATE_DIM * AUGMENTED_DIM];
            let n = self.members.len();
            for (i, net) in self.members.iter().enumerate() {
                net.forward_cached(z.as_slice(), &mut cache);
                net.input_jacobian_cached(&cache, &mut jac);
                let w = forgetting_weight(n - 1 - i);
                for (di, o) in d.iter_mut().zip(cache.output()) {
                    *di += w * o;
                }
                let jm = SMatrix::<f64, STATE_DIM, AUGMENTED_DIM>::from_row_slice(&jac);
                fx += jm.fixed_columns::<STATE_DIM>(0) * w;
                fu += jm.fixed_columns::<4>(STATE_DIM) * w;
            }
        }
        (d, fx, fu)
    }

    /// Discrete map over `dt`: one RK4 step with the control held, then
    /// quaternion renormalization.
    pub fn discretize(self: &Arc<Self>, dt: f64) -> Result<DiscreteEnsemble> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("discretization step must be positive, got {dt}")));
        }
        Ok(DiscreteEnsemble {
            model: Arc::clone(self),
            dt,
        })
    }
}

/// An ensemble snapshot bound to a step size.
#[derive(Debug, Clone)]
pub struct DiscreteEnsemble {
    model: Arc<EnsembleModel>,
    dt: f64,
}

impl DiscreteEnsemble {
    pub fn model(&self) -> &EnsembleModel {
        &self.model
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step_flat(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        let mut next = rk4_step(|_, y| self.model.derivative(y, u), x, 0.0, self.dt)?;
        normalize_attitude(&mut next)?;
        Ok(next)
    }

    pub fn step(&self, x: &QuadState, u: &crate::dynamics::ControlInput) -> Result<QuadState> {
        Ok(QuadState::from_vector(&self.step_flat(&x.to_vector(), &u.to_vector())?))
    }

    /// Next state and the Jacobians `∂x⁺/∂x`, `∂x⁺/∂u` of the discrete map.
    pub fn step_with_jacobian(
        &self,
        x: &StateVector,
        u: &ControlVector,
    ) -> Result<(StateVector, StateJacobian, ControlJacobian)> {
        let h = self.dt;
        let eye = StateJacobian::identity();

        let (k1, a1, b1) = self.model.derivative_with_jacobian(x, u);
        let (k1x, k1u) = (a1, b1);

        let y2 = x + k1 * (0.5 * h);
        let (k2, a2, b2) = self.model.derivative_with_jacobian(&y2, u);
        let k2x = a2 * (eye + k1x * (0.5 * h));
        let k2u = a2 * k1u * (0.5 * h) + b2;

        let y3 = x + k2 * (0.5 * h);
        let (k3, a3, b3) = self.model.derivative_with_jacobian(&y3, u);
        let k3x = a3 * (eye + k2x * (0.5 * h));
        let k3u = a3 * k2u * (0.5 * h) + b3;

        let y4 = x + k3 * h;
        let (k4, a4, b4) = self.model.derivative_with_jacobian(&y4, u);
        let k4x = a4 * (eye + k3x * h);
        let k4u = a4 * k3u * h + b4;

        let mut next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        ensure_finite(next.as_slice(), "discrete step")?;
        let mut jx = eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
        let mut ju = (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (h / 6.0);

        let q = Vector4::new(next[idx::QUAT], next[idx::QUAT + 1], next[idx::QUAT + 2], next[idx::QUAT + 3]);
        let n = q.norm();
        normalize_attitude(&mut next)?;
        let qh = q / n;
        let proj = (Matrix4::identity() - qh * qh.transpose()) / n;
        let qx = proj * jx.fixed_rows::<4>(idx::QUAT);
        jx.fixed_rows_mut::<4>(idx::QUAT).copy_from(&qx);
        let qu = proj * ju.fixed_rows::<4>(idx::QUAT);
        ju.fixed_rows_mut::<4>(idx::QUAT).copy_from(&qu);
        Ok((next, jx, ju))
    }
}
