mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;

use knode_mpc::config::ExperimentConfig;
use knode_mpc::dynamics::{QuadParams, QuadState, StateVector};
use knode_mpc::ensemble::{EnsembleModel, DEFAULT_LAYER_DIMS};
use knode_mpc::mpc::{
    control_step, shift_warm_start, solve_ocp, DiscreteModel, LinearModel, MpcSettings, OcpConfig, ReferenceWindow,
    WarmStart,
};
use knode_mpc::sim::{run_episode_with_model, segment_batch, MassSchedule, Method, ReferenceTrajectory, Scenario};
use knode_mpc::trainer::{train_member, TrainConfig};

use common::riccati_controls;

fn quad() -> (Arc<EnsembleModel>, OcpConfig) {
    let model = Arc::new(EnsembleModel::new(QuadParams::default(), 3, &DEFAULT_LAYER_DIMS).unwrap());
    let cfg = MpcSettings::default().ocp_config(model.nominal()).unwrap();
    (model, cfg)
}

fn dvec(v: &StateVector) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

fn hover_window(model: &EnsembleModel, cfg: &OcpConfig) -> ReferenceWindow {
    ReferenceWindow::constant(
        dvec(&QuadState::default().to_vector()),
        DVector::from_column_slice(model.nominal().hover_control().as_slice()),
        cfg.horizon,
    )
}

/// Cost of a trajectory recomputed from its definition.
fn tracking_cost(states: &[DVector<f64>], controls: &[DVector<f64>], w: &ReferenceWindow, cfg: &OcpConfig) -> f64 {
    let n = cfg.horizon;
    let mut j = 0.0;
    for i in 1..=n {
        let e = &states[i] - &w.states[i];
        let m = if i == n { &cfg.p } else { &cfg.q };
        j += (e.transpose() * m * &e)[0];
    }
    for u in controls {
        let d = u - &w.control;
        j += (d.transpose() * &cfg.r * &d)[0];
    }
    j
}

fn lqr_check(model: &LinearModel, cfg: &OcpConfig, x0: &DVector<f64>) -> f64 {
    let nx = model.a.nrows();
    let nu = model.b.ncols();
    let window = ReferenceWindow::constant(DVector::zeros(nx), DVector::zeros(nu), cfg.horizon);
    let sol = solve_ocp(model, x0, &window, cfg, None).unwrap();
    let oracle = riccati_controls(&model.a, &model.b, &cfg.q, &cfg.r, &cfg.p, cfg.horizon, x0);
    sol.controls.iter().zip(&oracle).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max)
}

#[test]
fn double_integrator_matches_riccati() {
    let model = LinearModel::double_integrator(0.1);
    let cfg = OcpConfig::unconstrained(20, 0.1, DMatrix::identity(2, 2), DMatrix::identity(1, 1), DMatrix::identity(2, 2));
    let err = lqr_check(&model, &cfg, &DVector::from_vec(vec![1.0, -0.5]));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn reference_shift_is_a_change_of_variables() {
    // tracking a constant state reference r with u_ref = 0 on a system where
    // r is an equilibrium equals regulating x - r
    let model = LinearModel::double_integrator(0.05);
    let cfg = OcpConfig::unconstrained(15, 0.05, DMatrix::identity(2, 2) * 3.0, DMatrix::identity(1, 1), DMatrix::identity(2, 2) * 10.0);
    let r = DVector::from_vec(vec![2.0, 0.0]);
    let x0 = DVector::from_vec(vec![0.5, 0.3]);
    let window = ReferenceWindow::constant(r.clone(), DVector::zeros(1), 15);
    let sol = solve_ocp(&model, &x0, &window, &cfg, None).unwrap();
    let oracle = riccati_controls(&model.a, &model.b, &cfg.q, &cfg.r, &cfg.p, 15, &(&x0 - &r));
    for (a, b) in sol.controls.iter().zip(&oracle) {
        assert!((a - b).amax() < 1e-6);
    }
}

#[test]
fn hover_first_input_is_hover_thrust() {
    let (model, cfg) = quad();
    let href = |_: f64| QuadState::default().to_vector();
    let (u, sol) = control_step(&model, &QuadState::default(), 0.0, &href, &cfg, None).unwrap();
    let mg = model.nominal().hover_thrust();
    assert!((u.thrust - mg).abs() < 0.01 * mg);
    assert!(sol.cost < 1e-8);
}

#[test]
fn warm_start_never_needs_more_iterations() {
    let (model, cfg) = quad();
    let d = model.discretize(cfg.dt).unwrap();
    let w = hover_window(&model, &cfg);
    let mut x0 = QuadState::hover_at(Vector3::new(0.3, -0.2, 0.1));
    x0.velocity = Vector3::new(0.2, 0.0, -0.1);
    let x0 = dvec(&x0.to_vector());
    let cold = solve_ocp(&d, &x0, &w, &cfg, None).unwrap();
    let warm = WarmStart {
        controls: cold.controls.clone(),
    };
    let again = solve_ocp(&d, &x0, &w, &cfg, Some(&warm)).unwrap();
    assert!(again.iterations <= cold.iterations, "{} > {}", again.iterations, cold.iterations);
    assert!(again.cost <= cold.cost);
}

#[test]
fn rollout_and_cost_are_consistent() {
    let (model, cfg) = quad();
    let d = model.discretize(cfg.dt).unwrap();
    let w = hover_window(&model, &cfg);
    let mut x0 = QuadState::hover_at(Vector3::new(-0.4, 0.1, 0.3));
    x0.body_rate = Vector3::new(0.5, -0.3, 0.1);
    let x0 = dvec(&x0.to_vector());
    let sol = solve_ocp(&d, &x0, &w, &cfg, None).unwrap();
    assert_eq!(sol.states[0], x0);
    for i in 0..cfg.horizon {
        let next = DiscreteModel::step(&d, &sol.states[i], &sol.controls[i]).unwrap();
        assert!((next - &sol.states[i + 1]).amax() < 1e-8);
    }
    let j = tracking_cost(&sol.states, &sol.controls, &w, &cfg);
    assert!((j - sol.cost).abs() <= 1e-9 * j.max(1.0));

    // never worse than holding hover thrust
    let hover: Vec<DVector<f64>> = vec![w.control.clone(); cfg.horizon];
    let mut xs = vec![x0.clone()];
    for u in &hover {
        let n = DiscreteModel::step(&d, xs.last().unwrap(), u).unwrap();
        xs.push(n);
    }
    assert!(sol.cost <= tracking_cost(&xs, &hover, &w, &cfg));
}

#[test]
fn shifted_warm_start_repeats_last_input() {
    let (model, cfg) = quad();
    let d = model.discretize(cfg.dt).unwrap();
    let w = hover_window(&model, &cfg);
    let x0 = dvec(&QuadState::hover_at(Vector3::new(0.0, 0.0, 0.2)).to_vector());
    let sol = solve_ocp(&d, &x0, &w, &cfg, None).unwrap();
    let ws = shift_warm_start(&sol);
    assert_eq!(ws.controls.len(), cfg.horizon);
    assert_eq!(ws.controls[..cfg.horizon - 1], sol.controls[1..]);
    assert_eq!(ws.controls[cfg.horizon - 1], sol.controls[cfg.horizon - 1]);
}

fn hover_scenario(multiplier: f64, t_final: f64) -> (Scenario, ExperimentConfig) {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.t_final_s = t_final;
    let scenario = Scenario {
        reference: ReferenceTrajectory::circle(1.0, 0.0),
        schedule: MassSchedule {
            breakpoints_s: vec![],
            multipliers: vec![multiplier],
        },
        t_final_s: t_final,
    };
    (scenario, cfg)
}

fn final_altitude_error(log: &knode_mpc::log::EpisodeLog) -> f64 {
    let tail = &log.records[log.records.len() - 100..];
    tail.iter().map(|r| r.state[2] - r.reference[2]).sum::<f64>() / tail.len() as f64
}

#[test]
fn hover_hold_uses_hover_thrust() {
    let (scenario, cfg) = hover_scenario(1.0, 1.0);
    let log = run_episode_with_model(Method::MpcNominal, &scenario, &cfg, 0, None).unwrap();
    let mg = QuadParams::default().hover_thrust();
    for r in &log.records {
        assert!((r.control[0] - mg).abs() < 0.01 * mg);
    }
}

#[test]
fn lighter_plant_overshoots_and_residual_reduces_it() {
    let (scenario, cfg) = hover_scenario(0.5, 3.0);
    let nominal = run_episode_with_model(Method::MpcNominal, &scenario, &cfg, 0, None).unwrap();
    let e_nominal = final_altitude_error(&nominal);
    assert!(e_nominal > 0.0, "{e_nominal}");

    let batch = segment_batch(&nominal, 1.0, 1.15, cfg.sim.dt_plant_s).unwrap();
    let empty = EnsembleModel::new(QuadParams::default(), 3, &DEFAULT_LAYER_DIMS).unwrap();
    let (trained, _) = train_member(&empty, &batch, &TrainConfig::default()).unwrap();
    let with = run_episode_with_model(Method::KnodeOffline, &scenario, &cfg, 0, Some(Arc::new(trained))).unwrap();
    let e_learned = final_altitude_error(&with);
    assert!(e_learned.abs() < e_nominal.abs(), "{e_learned} vs {e_nominal}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn lqr_oracle_on_random_weights(q1 in 0.1..10.0f64, q2 in 0.1..10.0f64, r in 0.05..5.0f64, pscale in 0.5..20.0f64,
                                     x1 in -3.0..3.0f64, x2 in -3.0..3.0f64) {
        let model = LinearModel::double_integrator(0.1);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![q1, q2]));
        let cfg = OcpConfig::unconstrained(20, 0.1, q.clone(), DMatrix::identity(1, 1) * r, q * pscale);
        let err = lqr_check(&model, &cfg, &DVector::from_vec(vec![x1, x2]));
        prop_assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn first_input_respects_bounds(dx in -1.0..1.0f64, dy in -1.0..1.0f64, dz in -1.0..1.0f64,
                                   vz in -2.0..2.0f64, wx in -3.0..3.0f64, frac in 0.5..1.5f64) {
        let (model, mut cfg) = quad();
        let mg = model.nominal().hover_thrust();
        cfg.u_max[0] = frac * mg;
        cfg.u_min[0] = 0.2 * mg;
        for k in 1..4 {
            cfg.u_max[k] = 5e-5;
            cfg.u_min[k] = -5e-5;
        }
        let mut x = QuadState::hover_at(Vector3::new(dx, dy, dz));
        x.velocity.z = vz;
        x.body_rate.x = wx;
        let href = |_: f64| QuadState::default().to_vector();
        let (u, sol) = control_step(&model, &x, 0.0, &href, &cfg, None).unwrap();
        let u = u.to_vector();
        for k in 0..4 {
            prop_assert!(u[k] >= cfg.u_min[k] && u[k] <= cfg.u_max[k]);
        }
        for c in &sol.controls {
            for k in 0..4 {
                prop_assert!(c[k] >= cfg.u_min[k] && c[k] <= cfg.u_max[k]);
            }
        }
    }

    #[test]
    fn warm_started_solves_are_bitwise_repeatable(dx in -0.5..0.5f64, dz in -0.5..0.5f64, t in 0.0..2.0f64) {
        let (model, cfg) = quad();
        let traj = ReferenceTrajectory::circle(2.0, 1.0);
        let x = QuadState::hover_at(Vector3::new(2.0 + dx, 0.0, dz));
        let (_, first) = control_step(&model, &x, t, &traj, &cfg, None).unwrap();
        let ws = shift_warm_start(&first);
        let a = control_step(&model, &x, t, &traj, &cfg, Some(&ws)).unwrap();
        let b = control_step(&model, &x, t, &traj, &cfg, Some(&ws)).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
    }
}
