//! Closed-loop simulation: the true plant with its hidden mass schedule, the
//! circular reference, the four compared controllers and the tracking metric.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dynamics::{
    derivative_with_mass, idx, normalize_attitude, rk4_step, ControlInput, QuadParams, QuadState, StateVector,
};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::log::{EpisodeLog, Event, EventKind, SolverDiagnostics, StepRecord};
use crate::mpc::{control_step, shift_warm_start, ReferenceSource};
use crate::orchestrator::{DataBatch, OnlineLearner, Sample};
use crate::trainer::{train_member_on, transitions, LossReport, TrainConfig};

/// Piecewise-constant multiplier on the nominal mass. `multipliers[k]` holds on
/// `[breakpoints[k-1], breakpoints[k])`, the last one until the end of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MassSchedule {
    pub breakpoints_s: Vec<f64>,
    pub multipliers: Vec<f64>,
}

impl Default for MassSchedule {
    fn default() -> Self {
        Self {
            breakpoints_s: vec![2.0, 5.0],
            multipliers: vec![1.0, 0.5, 1.33],
        }
    }
}

impl MassSchedule {
    pub fn constant() -> Self {
        Self {
            breakpoints_s: vec![],
            multipliers: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.len() != self.breakpoints_s.len() + 1 {
            return Err(Error::config(
                "sim.mass_schedule.multipliers",
                "need exactly one more multiplier than breakpoints",
            ));
        }
        if self.multipliers.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::config("sim.mass_schedule.multipliers", "must be positive"));
        }
        if self.breakpoints_s.iter().any(|b| !b.is_finite())
            || self.breakpoints_s.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config("sim.mass_schedule.breakpoints_s", "must be strictly increasing"));
        }
        Ok(())
    }

    /// Multiplier in force at `t`; a breakpoint belongs to the segment it opens.
    pub fn multiplier(&self, t: f64) -> f64 {
        let k = self.breakpoints_s.iter().take_while(|&&b| b <= t).count();
        self.multipliers[k]
    }
}

/// Horizontal circle at constant altitude, entered at `(R, 0)` relative to
/// the center and traversed counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTrajectory {
    pub radius_m: f64,
    pub speed_m_per_s: f64,
    pub altitude_m: f64,
    pub center_m: [f64; 2],
}

impl ReferenceTrajectory {
    pub fn circle(radius_m: f64, speed_m_per_s: f64) -> Self {
        Self {
            radius_m,
            speed_m_per_s,
            altitude_m: 0.0,
            center_m: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_m > 0.0 && self.radius_m.is_finite()) {
            return Err(Error::config("reference.radius_m", "must be positive"));
        }
        if !(self.speed_m_per_s >= 0.0 && self.speed_m_per_s.is_finite()) {
            return Err(Error::config("reference.speed_m_per_s", "must be non-negative"));
        }
        if !self.altitude_m.is_finite() || self.center_m.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("reference", "altitude and center must be finite"));
        }
        Ok(())
    }

    pub fn angular_rate(&self) -> f64 {
        self.speed_m_per_s / self.radius_m
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let th = self.angular_rate() * t;
        Vector3::new(
            self.center_m[0] + self.radius_m * th.cos(),
            self.center_m[1] + self.radius_m * th.sin(),
            self.altitude_m,
        )
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let th = self.angular_rate() * t;
        Vector3::new(-th.sin(), th.cos(), 0.0) * self.speed_m_per_s
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        let w = self.angular_rate();
        let th = w * t;
        Vector3::new(-th.cos(), -th.sin(), 0.0) * (self.speed_m_per_s * w)
    }

    /// Position and velocity along the circle, level attitude, zero rates.
    pub fn sample(&self, t: f64) -> QuadState {
        QuadState {
            position: self.position(t),
            velocity: self.velocity(t),
            attitude: Vector4::new(1.0, 0.0, 0.0, 0.0),
            body_rate: Vector3::zeros(),
        }
    }
}

impl ReferenceSource for ReferenceTrajectory {
    fn reference_state(&self, t: f64) -> StateVector {
        self.sample(t).to_vector()
    }
}

pub fn reference_sample(traj: &ReferenceTrajectory, t: f64) -> QuadState {
    traj.sample(t)
}

/// One plant step of length `dt` starting at `t`, with the scheduled mass.
pub fn plant_step(
    x: &QuadState,
    u: &ControlInput,
    t: f64,
    dt: f64,
    schedule: &MassSchedule,
    p: &QuadParams,
) -> Result<QuadState> {
    if !x.is_finite() {
        return Err(Error::non_finite("plant state"));
    }
    let mass = schedule.multiplier(t) * p.mass();
    let uv = u.to_vector();
    let mut next = rk4_step(|_, s| derivative_with_mass(s, &uv, mass, p), &x.to_vector(), t, dt)?;
    normalize_attitude(&mut next)?;
    Ok(QuadState::from_vector(&next))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeoGains {
    /// N/m
    pub position: [f64; 3],
    /// N·s/m
    pub velocity: [f64; 3],
    /// N·m/rad
    pub attitude: [f64; 3],
    /// N·m·s/rad
    pub rate: [f64; 3],
}

impl Default for GeoGains {
    fn default() -> Self {
        // natural frequencies of about 3 rad/s (translation) and 20 rad/s
        // (attitude) for the default vehicle, damping near 0.8
        Self {
            position: [0.3, 0.3, 0.3],
            velocity: [0.16, 0.16, 0.16],
            attitude: [5.6e-3, 5.6e-3, 8.8e-3],
            rate: [4.5e-4, 4.5e-4, 7.0e-4],
        }
    }
}

impl GeoGains {
    pub fn validate(&self) -> Result<()> {
        let all = self.position.iter().chain(&self.velocity).chain(&self.attitude).chain(&self.rate);
        if all.clone().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::config("geometric", "all gains must be positive"));
        }
        Ok(())
    }
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Position PD with gravity and acceleration feedforward, thrust along the
/// body axis, attitude PD toward the zero-yaw frame aligned with the desired
/// force. Output is clipped to the actuator box.
pub fn geometric_control(
    x: &QuadState,
    reference: &ReferenceTrajectory,
    t: f64,
    gains: &GeoGains,
    p: &QuadParams,
) -> Result<ControlInput> {
    let r = crate::dynamics::rotation_from_quaternion(&x.attitude)?;
    let ep = reference.position(t) - x.position;
    let ev = reference.velocity(t) - x.velocity;
    let kp = Vector3::from(gains.position);
    let kv = Vector3::from(gains.velocity);
    let force = kp.component_mul(&ep) + kv.component_mul(&ev) + (reference.acceleration(t) - p.gravity()) * p.mass();
    let thrust = force.dot(&r.column(2));

    let b3 = if force.norm() > 1e-9 { force.normalize() } else { Vector3::z() };
    let b2 = b3.cross(&Vector3::x());
    let b2 = if b2.norm() > 1e-9 { b2.normalize() } else { Vector3::y() };
    let b1 = b2.cross(&b3);
    let rd = Matrix3::from_columns(&[b1, b2, b3]);
    let e_r = vee(&(rd.transpose() * r - r.transpose() * rd)) * 0.5;
    let w = x.body_rate;
    let tau = -Vector3::from(gains.attitude).component_mul(&e_r) - Vector3::from(gains.rate).component_mul(&w)
        + w.cross(&(p.inertia() * w));

    let (lo, hi) = p.control_bounds();
    let u = nalgebra::Vector4::new(thrust, tau.x, tau.y, tau.z);
    Ok(ControlInput::from_vector(&u.zip_zip_map(&lo, &hi, |v, l, h| v.clamp(l, h))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MpcNominal,
    KnodeOffline,
    KnodeOnline,
    Geometric,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::KnodeOnline, Method::MpcNominal, Method::KnodeOffline, Method::Geometric];

    pub fn name(self) -> &'static str {
        match self {
            Method::MpcNominal => "mpc-nominal",
            Method::KnodeOffline => "knode-offline",
            Method::KnodeOnline => "knode-online",
            Method::Geometric => "geometric",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether the episode outcome depends on the seed (through network
    /// initialization).
    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::KnodeOffline | Method::KnodeOnline)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub reference: ReferenceTrajectory,
    pub schedule: MassSchedule,
    pub t_final_s: f64,
}

impl Scenario {
    pub fn from_config(cfg: &ExperimentConfig, radius_m: f64, speed_m_per_s: f64) -> Self {
        Self {
            reference: ReferenceTrajectory {
                radius_m,
                speed_m_per_s,
                altitude_m: cfg.sim.altitude_m,
                center_m: cfg.sim.center_m,
            },
            schedule: cfg.sim.mass_schedule.clone(),
            t_final_s: cfg.sim.t_final_s,
        }
    }

    pub fn label(&self) -> String {
        format!("R{}_v{}", self.reference.radius_m, self.reference.speed_m_per_s)
    }
}

/// Trainer settings for one episode: the configured ones with the episode seed.
pub fn episode_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.trainer.clone()
    }
}

fn steps_of(duration: f64, dt: f64) -> usize {
    (duration / dt).round() as usize
}

/// Closed loop of one method on one scenario. Knode-offline first runs the
/// offline pipeline for this scenario and seed.
pub fn run_episode(method: Method, scenario: &Scenario, cfg: &ExperimentConfig, seed: u64) -> Result<EpisodeLog> {
    let initial = match method {
        Method::KnodeOffline => Some(Arc::new(offline_pipeline(scenario, cfg, seed)?.0)),
        _ => None,
    };
    run_episode_with_model(method, scenario, cfg, seed, initial)
}

/// Closed loop with an explicit starting model (ignored by the geometric
/// controller; defaults to the knowledge-only model).
pub fn run_episode_with_model(
    method: Method,
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    seed: u64,
    initial: Option<Arc<EnsembleModel>>,
) -> Result<EpisodeLog> {
    run_episode_observed(method, scenario, cfg, seed, initial, &mut |_| {})
}

/// As [`run_episode_with_model`], calling `on_model` with the starting model
/// of a learned method and with every model the trainer publishes.
pub fn run_episode_observed(
    method: Method,
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    seed: u64,
    initial: Option<Arc<EnsembleModel>>,
    on_model: &mut dyn FnMut(&Arc<EnsembleModel>),
) -> Result<EpisodeLog> {
    cfg.validate()?;
    scenario.reference.validate()?;
    scenario.schedule.validate()?;
    let params = cfg.quad.params()?;
    let dt = cfg.sim.dt_plant_s;
    let ocp = cfg.mpc.ocp_config(&params)?;
    let substeps = steps_of(ocp.dt, dt);
    let n_steps = steps_of(scenario.t_final_s, dt);
    let traj = &scenario.reference;

    let mut model = match initial {
        Some(m) => m,
        None => Arc::new(cfg.ensemble.empty_model(params.clone())?),
    };
    if matches!(method, Method::KnodeOffline | Method::KnodeOnline) {
        on_model(&model);
    }
    let mut learner = match method {
        Method::KnodeOnline => Some(OnlineLearner::new(
            Arc::clone(&model),
            &cfg.orchestrator,
            episode_train_config(cfg, seed),
            dt,
            scenario.t_final_s,
        )?),
        _ => None,
    };

    let mut log = EpisodeLog {
        method: method.name().to_string(),
        seed,
        config_fingerprint: cfg.fingerprint(),
        records: Vec::with_capacity(n_steps),
        events: Vec::new(),
        failed: false,
    };
    let mut x = traj.sample(0.0);
    let mut u = ControlInput::from_vector(&params.hover_control());
    let mut diag = SolverDiagnostics::default();
    let mut warm = None;
    let mut multiplier = scenario.schedule.multiplier(0.0);

    for k in 0..n_steps {
        let t = k as f64 * dt;
        let m = scenario.schedule.multiplier(t);
        if m != multiplier {
            multiplier = m;
            log.events.push(Event::new(t, EventKind::MassChange { multiplier: m }));
        }
        let boundary = k % substeps == 0;
        if let Some(l) = learner.as_mut() {
            let before = l.published().version();
            model = l.begin_step(t, boundary, &mut log.events);
            if l.published().version() != before {
                on_model(l.published());
            }
        }

        let step: Result<()> = (|| {
            match method {
                Method::Geometric => {
                    u = geometric_control(&x, traj, t, &cfg.geometric, &params)?;
                    diag = SolverDiagnostics::default();
                }
                _ if boundary => {
                    let (u0, sol) = control_step(&model, &x, t, traj, &ocp, warm.as_ref())?;
                    u = u0;
                    diag = SolverDiagnostics {
                        cost: sol.cost,
                        iterations: sol.iterations,
                        converged: sol.converged,
                    };
                    warm = Some(shift_warm_start(&sol));
                }
                _ => {}
            }
            Ok(())
        })();
        if let Err(e) = step {
            log.events.push(Event::new(t, EventKind::Failure { reason: e.to_string() }));
            log.failed = true;
            break;
        }

        log.records.push(StepRecord {
            t,
            state: x.to_vector(),
            reference: traj.reference_state(t),
            control: u.to_vector(),
            solver: diag,
            model_version: model.version(),
        });
        if let Some(l) = learner.as_mut() {
            l.record(x.clone(), u.clone(), t, &mut log.events)?;
        }
        match plant_step(&x, &u, t, dt, &scenario.schedule, &params) {
            Ok(next) if next.is_finite() => x = next,
            Ok(_) => {
                log.events.push(Event::new(t + dt, EventKind::Failure { reason: "non-finite plant state".into() }));
                log.failed = true;
                break;
            }
            Err(e) => {
                log.events.push(Event::new(t + dt, EventKind::Failure { reason: e.to_string() }));
                log.failed = true;
                break;
            }
        }
    }
    Ok(log)
}

/// Consecutive records of `log` with `t_a ≤ t < t_b` as a data batch.
pub fn segment_batch(log: &EpisodeLog, t_a: f64, t_b: f64, dt: f64) -> Result<DataBatch> {
    let eps = 1e-9;
    let samples: Vec<Sample> = log
        .records
        .iter()
        .filter(|r| r.t >= t_a - eps && r.t < t_b - eps)
        .map(|r| Sample {
            t: r.t,
            state: QuadState::from_vector(&r.state),
            control: ControlInput::from_vector(&r.control),
            model_version: r.model_version,
        })
        .collect();
    DataBatch::new(samples, dt)
}

/// Trains one frozen member on nominal-MPC flight data from the start of the
/// scenario up to the configured cutoff.
pub fn offline_pipeline(scenario: &Scenario, cfg: &ExperimentConfig, seed: u64) -> Result<(EnsembleModel, LossReport)> {
    cfg.validate()?;
    cfg.check_offline_window()?;
    if scenario.t_final_s + 1e-9 < cfg.offline.collect_until_s {
        return Err(Error::config("offline.collect_until_s", "offline data window exceeds the scenario length"));
    }
    let collect = Scenario {
        t_final_s: cfg.offline.collect_until_s,
        ..scenario.clone()
    };
    let log = run_episode_with_model(Method::MpcNominal, &collect, cfg, seed, None)?;
    if log.failed {
        return Err(Error::TrainingAborted("nominal data collection failed".into()));
    }
    offline_from_log(&log, cfg, seed)
}

/// Offline training on an existing nominal-MPC log.
pub fn offline_from_log(log: &EpisodeLog, cfg: &ExperimentConfig, seed: u64) -> Result<(EnsembleModel, LossReport)> {
    let dt = cfg.sim.dt_plant_s;
    let batch = segment_batch(log, 0.0, cfg.offline.collect_until_s, dt)?;
    let stride = cfg.offline.transition_stride.max(1);
    let data: Vec<_> = transitions(&batch)?.into_iter().step_by(stride).collect();
    let params = cfg.quad.params()?;
    let empty = cfg.ensemble.empty_model(params)?;
    train_member_on(&empty, &data, dt, &episode_train_config(cfg, seed))
}

/// Mean squared position error per axis and their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseSummary {
    pub overall: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Tracking error over records with `t_a ≤ t ≤ t_b`.
pub fn mse(log: &EpisodeLog, t_a: f64, t_b: f64) -> Result<MseSummary> {
    let eps = 1e-9;
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for r in log.records.iter().filter(|r| r.t >= t_a - eps && r.t <= t_b + eps) {
        for (k, a) in acc.iter_mut().enumerate() {
            let e = r.state[idx::POS + k] - r.reference[idx::POS + k];
            *a += e * e;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no records in window [{t_a}, {t_b}]")));
    }
    let [x, y, z] = acc.map(|a| a / n as f64);
    Ok(MseSummary {
        overall: (x + y + z) / 3.0,
        x,
        y,
        z,
    })
}
