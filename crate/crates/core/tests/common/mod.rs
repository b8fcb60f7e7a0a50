//! Helpers and independent oracles shared by the integration suites.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use knode_mpc::dynamics::{AugmentedState, ControlInput, QuadParams, QuadState};
use knode_mpc::ensemble::{EnsembleModel, DEFAULT_LAYER_DIMS};
use knode_mpc::mlp::Mlp;
use knode_mpc::orchestrator::{DataBatch, Sample};
use knode_mpc::sim::{plant_step, MassSchedule};
use knode_mpc::trainer::{knode_loss_on, loss_and_gradient, Transition};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_state(r: &mut ChaCha8Rng) -> QuadState {
    let mut v3 = |s: f64| Vector3::new(r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s));
    let position = v3(3.0);
    let velocity = v3(2.0);
    let body_rate = v3(3.0);
    let axis = v3(1.0).normalize();
    let angle: f64 = r.random_range(-0.6..0.6);
    let s = (angle / 2.0).sin();
    QuadState {
        position,
        velocity,
        attitude: Vector4::new((angle / 2.0).cos(), s * axis.x, s * axis.y, s * axis.z),
        body_rate,
    }
}

pub fn random_control(r: &mut ChaCha8Rng) -> ControlInput {
    ControlInput::new(
        r.random_range(0.1..0.5),
        Vector3::new(r.random_range(-1e-3..1e-3), r.random_range(-1e-3..1e-3), r.random_range(-1e-3..1e-3)),
    )
}

pub fn random_augmented(r: &mut ChaCha8Rng) -> AugmentedState {
    AugmentedState::from_parts(&random_state(r), &random_control(r))
}

/// Knowledge model plus `members` freshly initialized nets.
pub fn random_model(seed: u64, capacity: usize, members: usize) -> EnsembleModel {
    let mut m = EnsembleModel::new(QuadParams::default(), capacity, &DEFAULT_LAYER_DIMS).unwrap();
    for k in 0..members {
        m = m
            .push_member(Mlp::init_uniform(&DEFAULT_LAYER_DIMS, seed.wrapping_mul(31).wrapping_add(k as u64)).unwrap())
            .unwrap();
    }
    m
}

/// Transitions whose targets are the current state plus uniform noise.
pub fn random_transitions(r: &mut ChaCha8Rng, n: usize, noise: f64) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let z = random_augmented(r);
            let mut next = z.state();
            next.iter_mut().for_each(|v| *v += r.random_range(-noise..noise));
            Transition { z, next }
        })
        .collect()
}

/// Replaces the newest member's parameters.
pub fn with_newest(model: &EnsembleModel, params: Vec<f64>) -> EnsembleModel {
    let mut members: Vec<Mlp> = model.members().cloned().collect();
    *members.last_mut().unwrap() = Mlp::from_params(model.layer_dims(), params).unwrap();
    EnsembleModel::from_parts(model.nominal().clone(), model.capacity(), model.layer_dims(), members, model.version())
        .unwrap()
}

pub struct GradCheck {
    pub trials: usize,
    pub coordinates: usize,
    /// Worst over trials of `‖g - g_fd‖ / max(‖g‖, ‖g_fd‖)` on the sampled coordinates.
    pub max_rel_err: f64,
    /// Worst single-coordinate `|g - g_fd| / max(|g|, |g_fd|)`.
    pub max_coord_rel_err: f64,
    /// Worst single-coordinate excess over `rel·max(|g|, |g_fd|) + abs`, for the
    /// `(rel, abs)` passed in.
    pub max_coord_excess: f64,
}

/// Central differences with step `h` on `coords` random coordinates of the
/// newest member, over `trials` random models and batches.
pub fn finite_difference_check(trials: usize, coords: usize, h: f64, rel: f64, abs: f64) -> GradCheck {
    let dt = 0.002;
    let mut out = GradCheck {
        trials,
        coordinates: coords,
        max_rel_err: 0.0,
        max_coord_rel_err: 0.0,
        max_coord_excess: f64::NEG_INFINITY,
    };
    for trial in 0..trials {
        let mut r = rng(1000 + trial as u64);
        let members = 1 + trial % 3;
        let model = random_model(trial as u64, 3, members);
        let data = random_transitions(&mut r, 12, 0.05);
        let l2 = if trial % 2 == 0 { 0.0 } else { 1e-4 };
        let (_, grad) = loss_and_gradient(&model, &data, dt, l2).unwrap();
        let theta = model.newest().unwrap().params().to_vec();
        let (mut diff2, mut a2, mut f2) = (0.0, 0.0, 0.0);
        for _ in 0..coords {
            let k = r.random_range(0..theta.len());
            let eval = |delta: f64| {
                let mut p = theta.clone();
                p[k] += delta;
                knode_loss_on(&with_newest(&model, p), &data, dt, l2).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let (a, err) = (grad[k], (grad[k] - fd).abs());
            let scale = a.abs().max(fd.abs());
            if scale > 0.0 {
                out.max_coord_rel_err = out.max_coord_rel_err.max(err / scale);
            }
            out.max_coord_excess = out.max_coord_excess.max(err - (rel * scale + abs));
            diff2 += err * err;
            a2 += a * a;
            f2 += fd * fd;
        }
        let norm = a2.max(f2).sqrt();
        if norm > 0.0 {
            out.max_rel_err = out.max_rel_err.max(diff2.sqrt() / norm);
        }
    }
    out
}

/// Plant flight at a fixed mass multiplier under a hover-centred excitation,
/// sampled every plant step.
pub fn flight_batch(mass_multiplier: f64, samples: usize, seed: u64) -> DataBatch {
    let p = QuadParams::default();
    let dt = 0.002;
    let schedule = MassSchedule {
        breakpoints_s: vec![],
        multipliers: vec![mass_multiplier],
    };
    let mut r = rng(seed);
    let phase: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..6.28));
    let mut x = QuadState::hover_at(Vector3::new(1.0, 0.0, 0.5));
    let mut out = Vec::with_capacity(samples);
    for k in 0..samples {
        let t = k as f64 * dt;
        let u = ControlInput::new(
            p.hover_thrust() * (1.0 + 0.2 * (7.0 * t + phase[0]).sin()),
            Vector3::new(
                2e-5 * (11.0 * t + phase[1]).sin(),
                2e-5 * (13.0 * t + phase[2]).sin(),
                1e-5 * (5.0 * t + phase[3]).sin(),
            ),
        );
        out.push(Sample {
            t,
            state: x,
            control: u,
            model_version: 0,
        });
        x = plant_step(&x, &u, t, dt, &schedule, &p).unwrap();
    }
    DataBatch::new(out, dt).unwrap()
}

/// Finite-horizon LQR for `x+ = A x + B u`, stage cost `xᵀQx + uᵀRu` on
/// `x_1..x_{N-1}` and `u_0..u_{N-1}`, terminal `x_Nᵀ P x_N`. Returns the
/// optimal open-loop controls from `x0`.
pub fn riccati_controls(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    n: usize,
    x0: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let mut s = p.clone();
    let mut gains = vec![DMatrix::zeros(b.ncols(), a.nrows()); n];
    for k in (0..n).rev() {
        let bts = b.transpose() * &s;
        let k_gain = (r + &bts * b).lu().solve(&(&bts * a)).unwrap();
        s = q + a.transpose() * &s * (a - b * &k_gain);
        s = (&s + s.transpose()) * 0.5;
        gains[k] = k_gain;
    }
    let mut x = x0.clone();
    gains
        .iter()
        .map(|kg| {
            let u = -(kg * &x);
            x = a * &x + b * &u;
            u
        })
        .collect()
}
