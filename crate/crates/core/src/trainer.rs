//! One-step-ahead loss for the hybrid model and exact gradients with respect
//! to the newest residual network, obtained by reverse-mode differentiation
//! through a single RK4 step. Older members and the nominal model are frozen:
//! they take part in the forward pass and in the chain rule through the
//! stage states, but never receive parameter updates.

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    derivative_flat, nominal_jacobian, rk4_step, AugmentedState, ControlVector, StateVector, STATE_DIM,
};
use crate::ensemble::{forgetting_weight, EnsembleModel};
use crate::error::{Error, Result};
use crate::mlp::{ForwardCache, Mlp};
use crate::orchestrator::DataBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_coeff: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            l2_coeff: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("trainer.epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("trainer.learning_rate", "must be positive"));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(Error::config("trainer.l2_coeff", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("trainer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("trainer.beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("trainer.epsilon", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss at the start of every epoch.
    pub per_epoch: Vec<f64>,
}

/// One `(z_i, x_{i+1})` pair of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub z: AugmentedState,
    pub next: StateVector,
}

pub fn transitions(batch: &DataBatch) -> Result<Vec<Transition>> {
    let s = batch.samples();
    if s.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a batch needs at least 2 samples, got {}",
            s.len()
        )));
    }
    Ok(s.windows(2)
        .map(|w| Transition {
            z: AugmentedState::from_parts(&w[0].state, &w[0].control),
            next: w[1].state.to_vector(),
        })
        .collect())
}

/// Integrates the hybrid model from `z` over `dt` with the control held and
/// returns the state block.
pub fn one_step_predict(model: &EnsembleModel, z: &AugmentedState, dt: f64) -> Result<StateVector> {
    let u = z.control();
    rk4_step(|_, y| model.derivative(y, &u), &z.state(), 0.0, dt)
}

fn l2_term(model: &EnsembleModel, l2_coeff: f64) -> f64 {
    match model.newest() {
        Some(net) if l2_coeff > 0.0 => l2_coeff * net.params().iter().map(|p| p * p).sum::<f64>(),
        _ => 0.0,
    }
}

pub fn knode_loss(model: &EnsembleModel, batch: &DataBatch, l2_coeff: f64) -> Result<f64> {
    knode_loss_on(model, &transitions(batch)?, batch.dt(), l2_coeff)
}

pub fn knode_loss_on(model: &EnsembleModel, data: &[Transition], dt: f64, l2_coeff: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no transitions to evaluate".into()));
    }
    let mut sum = 0.0;
    for tr in data {
        let pred = one_step_predict(model, &tr.z, dt)?;
        sum += (pred - tr.next).norm_squared();
    }
    let loss = sum / data.len() as f64 + l2_term(model, l2_coeff);
    if !loss.is_finite() {
        return Err(Error::non_finite("knode loss"));
    }
    Ok(loss)
}

pub fn loss_gradient(model: &EnsembleModel, batch: &DataBatch, l2_coeff: f64) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(model, &transitions(batch)?, batch.dt(), l2_coeff)?.1)
}

/// Per-stage forward record: the stage state and each member's activations.
struct Stage {
    y: StateVector,
    caches: Vec<ForwardCache>,
}

struct GradientWorkspace {
    stages: Vec<Stage>,
    grad_in: Vec<f64>,
}

impl GradientWorkspace {
    fn new(n_members: usize) -> Self {
        Self {
            stages: (0..4)
                .map(|_| Stage {
                    y: StateVector::zeros(),
                    caches: (0..n_members).map(|_| ForwardCache::default()).collect(),
                })
                .collect(),
            grad_in: vec![0.0; crate::dynamics::AUGMENTED_DIM],
        }
    }
}

fn stage_eval(model: &EnsembleModel, weights: &[f64], u: &ControlVector, stage: &mut Stage) -> StateVector {
    let mut d = derivative_flat(&stage.y, u, model.nominal());
    let z = AugmentedState::new(&stage.y, u);
    for ((net, cache), w) in model.members().zip(stage.caches.iter_mut()).zip(weights) {
        net.forward_cached(z.as_slice(), cache);
        for (di, o) in d.iter_mut().zip(cache.output()) {
            *di += w * o;
        }
    }
    d
}

/// Same as [`stage_eval`] when `frozen` already holds the nominal part plus
/// every member but the newest, summed in member order.
fn stage_eval_newest(model: &EnsembleModel, frozen: &StateVector, u: &ControlVector, stage: &mut Stage) -> StateVector {
    let mut d = *frozen;
    let z = AugmentedState::new(&stage.y, u);
    let net = model.newest().expect("non-empty");
    let cache = stage.caches.last_mut().expect("non-empty");
    net.forward_cached(z.as_slice(), cache);
    for (di, o) in d.iter_mut().zip(cache.output()) {
        *di += forgetting_weight(0) * o;
    }
    d
}

/// Frozen part of the first RK4 stage for every transition. It does not
/// depend on the newest member, so it is computed once per training run.
fn frozen_first_stage(model: &EnsembleModel, data: &[Transition]) -> Vec<StateVector> {
    let n = model.len();
    let mut cache = ForwardCache::default();
    data.iter()
        .map(|tr| {
            let x = tr.z.state();
            let u = tr.z.control();
            let mut d = derivative_flat(&x, &u, model.nominal());
            for (i, net) in model.members().take(n - 1).enumerate() {
                net.forward_cached(tr.z.as_slice(), &mut cache);
                let w = forgetting_weight(n - 1 - i);
                for (di, o) in d.iter_mut().zip(cache.output()) {
                    *di += w * o;
                }
            }
            d
        })
        .collect()
}

/// Pulls `v` back through the derivative at one stage: returns `(∂f/∂y)ᵀ v`
/// and accumulates `(∂f/∂θ_newest)ᵀ v` into `grad`.
fn stage_pullback(
    model: &EnsembleModel,
    weights: &[f64],
    u: &ControlVector,
    stage: &Stage,
    v: &StateVector,
    grad: &mut [f64],
    ws_grad_in: &mut [f64],
    need_state: bool,
) -> StateVector {
    let n = model.len();
    let mut out = StateVector::zeros();
    if need_state {
        let (fx, _) = nominal_jacobian(&stage.y, u, model.nominal());
        out = fx.tr_mul(v);
    }
    let mut seed = [0.0; STATE_DIM];
    for (k, ((net, cache), w)) in model.members().zip(&stage.caches).zip(weights).enumerate() {
        let newest = k + 1 == n;
        if !newest && !need_state {
            continue;
        }
        for (s, vi) in seed.iter_mut().zip(v.iter()) {
            *s = w * vi;
        }
        let gp = if newest { Some(&mut *grad) } else { None };
        let gi = if need_state { Some(&mut *ws_grad_in) } else { None };
        net.backward(cache, &seed, gp, gi);
        if need_state {
            for (o, g) in out.iter_mut().zip(ws_grad_in.iter()) {
                *o += g;
            }
        }
    }
    out
}

/// Loss and its gradient with respect to the newest member's parameters.
pub fn loss_and_gradient(
    model: &EnsembleModel,
    data: &[Transition],
    dt: f64,
    l2_coeff: f64,
) -> Result<(f64, Vec<f64>)> {
    loss_and_gradient_with(model, data, dt, l2_coeff, None)
}

fn loss_and_gradient_with(
    model: &EnsembleModel,
    data: &[Transition],
    dt: f64,
    l2_coeff: f64,
    frozen: Option<&[StateVector]>,
) -> Result<(f64, Vec<f64>)> {
    let newest = model.newest().ok_or(Error::EmptyEnsemble)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no transitions to evaluate".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {dt}")));
    }
    let n = model.len();
    let weights: Vec<f64> = (0..n).map(|i| forgetting_weight(n - 1 - i)).collect();
    let mut grad = vec![0.0; newest.num_params()];
    let mut ws = GradientWorkspace::new(n);
    let scale = 1.0 / data.len() as f64;
    let mut sum = 0.0;
    let h = dt;

    for (i, tr) in data.iter().enumerate() {
        let x = tr.z.state();
        let u = tr.z.control();
        ws.stages[0].y = x;
        let k1 = match frozen {
            Some(f) => stage_eval_newest(model, &f[i], &u, &mut ws.stages[0]),
            None => stage_eval(model, &weights, &u, &mut ws.stages[0]),
        };
        ws.stages[1].y = x + k1 * (0.5 * h);
        let k2 = stage_eval(model, &weights, &u, &mut ws.stages[1]);
        ws.stages[2].y = x + k2 * (0.5 * h);
        let k3 = stage_eval(model, &weights, &u, &mut ws.stages[2]);
        ws.stages[3].y = x + k3 * h;
        let k4 = stage_eval(model, &weights, &u, &mut ws.stages[3]);
        let pred = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let err = pred - tr.next;
        sum += err.norm_squared();

        let g = err * (2.0 * scale);
        let gk4 = g * (h / 6.0);
        let gy4 = stage_pullback(model, &weights, &u, &ws.stages[3], &gk4, &mut grad, &mut ws.grad_in, true);
        let gk3 = g * (h / 3.0) + gy4 * h;
        let gy3 = stage_pullback(model, &weights, &u, &ws.stages[2], &gk3, &mut grad, &mut ws.grad_in, true);
        let gk2 = g * (h / 3.0) + gy3 * (0.5 * h);
        let gy2 = stage_pullback(model, &weights, &u, &ws.stages[1], &gk2, &mut grad, &mut ws.grad_in, true);
        let gk1 = g * (h / 6.0) + gy2 * (0.5 * h);
        stage_pullback(model, &weights, &u, &ws.stages[0], &gk1, &mut grad, &mut ws.grad_in, false);
    }

    let loss = sum * scale + l2_term(model, l2_coeff);
    if l2_coeff > 0.0 {
        for (g, p) in grad.iter_mut().zip(newest.params()) {
            *g += 2.0 * l2_coeff * p;
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::non_finite("knode loss gradient"));
    }
    Ok((loss, grad))
}

/// Adaptive-moment optimizer state for one flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
}

/// Seed for the member that will be pushed on top of `model`.
pub fn member_seed(cfg: &TrainConfig, model: &EnsembleModel) -> u64 {
    cfg.seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(model.version().wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Pushes a freshly initialized member and fits it to `batch`. The returned
/// snapshot holds the best parameters seen, so `final_loss ≤ initial_loss`.
pub fn train_member(model: &EnsembleModel, batch: &DataBatch, cfg: &TrainConfig) -> Result<(EnsembleModel, LossReport)> {
    train_member_on(model, &transitions(batch)?, batch.dt(), cfg)
}

pub fn train_member_on(
    model: &EnsembleModel,
    data: &[Transition],
    dt: f64,
    cfg: &TrainConfig,
) -> Result<(EnsembleModel, LossReport)> {
    cfg.validate()?;
    let fresh = Mlp::init_uniform(model.layer_dims(), member_seed(cfg, model))?;
    let mut current = model.push_member(fresh)?;
    let mut params = current.newest().expect("just pushed").params().to_vec();
    let mut adam = Adam::new(params.len());
    let mut per_epoch = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, params.clone());
    let frozen = frozen_first_stage(&current, data);

    let abort = |e: Error| match e {
        Error::NonFinite { what } => Error::TrainingAborted(format!("non-finite {what}")),
        other => other,
    };

    for _ in 0..cfg.epochs {
        let (loss, grad) = loss_and_gradient_with(&current, data, dt, cfg.l2_coeff, Some(&frozen)).map_err(abort)?;
        per_epoch.push(loss);
        if loss < best.0 {
            best = (loss, params.clone());
        }
        adam.step(&mut params, &grad, cfg);
        current = current.with_newest_replaced(Mlp::from_params(model.layer_dims(), params.clone())?)?;
    }
    let last = knode_loss_on(&current, data, dt, cfg.l2_coeff).map_err(abort)?;
    if last < best.0 {
        best = (last, params);
    }
    let trained = current.with_newest_replaced(Mlp::from_params(model.layer_dims(), best.1)?)?;
    let report = LossReport {
        initial_loss: per_epoch[0],
        final_loss: best.0,
        per_epoch,
    };
    Ok((trained, report))
}
