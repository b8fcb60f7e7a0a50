//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};

use knode_mpc::checkpoint::{checkpoint_from_str, checkpoint_to_string};
use knode_mpc::config::ExperimentConfig;
use knode_mpc::dynamics::{ControlInput, QuadParams, QuadState};
use knode_mpc::ensemble::{EnsembleModel, DEFAULT_LAYER_DIMS};
use knode_mpc::grid::run_grid;
use knode_mpc::log::{EpisodeLog, Event, EventKind};
use knode_mpc::mlp::Mlp;
use knode_mpc::mpc::{solve_ocp, LinearModel, OcpConfig, ReferenceWindow};
use knode_mpc::orchestrator::{CollectorOutcome, CollectorState, Sample};
use knode_mpc::report::{EpisodeResult, ResultTable};
use knode_mpc::sim::{mse, run_episode, segment_batch, MassSchedule, Method, Scenario};
use knode_mpc::trainer::{knode_loss, train_member, TrainConfig};

use common::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradient() -> Verdict {
    let start = Instant::now();
    let c = finite_difference_check(10, 50, 1e-6, 1e-5, 1e-10);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        c.max_rel_err < 1e-5 && c.max_coord_excess <= 0.0 && secs < 60.0,
        format!(
            "{} nets x {} coords, rel err {:.2e} (worst single coord {:.2e}, all within 1e-5 rel + 1e-10 abs: {}), {:.1} s",
            c.trials,
            c.coordinates,
            c.max_rel_err,
            c.max_coord_rel_err,
            c.max_coord_excess <= 0.0,
            secs
        ),
    )
}

fn lqr() -> Verdict {
    let start = Instant::now();
    let model = LinearModel::double_integrator(0.1);
    let (q, r) = (DMatrix::identity(2, 2), DMatrix::identity(1, 1));
    let cfg = OcpConfig::unconstrained(20, 0.1, q.clone(), r.clone(), q.clone());
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let window = ReferenceWindow::constant(DVector::zeros(2), DVector::zeros(1), 20);
    let sol = solve_ocp(&model, &x0, &window, &cfg, None).unwrap();
    let oracle = riccati_controls(&model.a, &model.b, &q, &r, &q, 20, &x0);
    let err = sol.controls.iter().zip(&oracle).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(err < 1e-6 && secs < 1.0, format!("max |u - u_lqr| {err:.2e} over N=20, {secs:.3} s"))
}

fn hover() -> Verdict {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.sim.mass_schedule = MassSchedule::constant();
    let scenario = Scenario::from_config(&cfg, 3.0, 0.0);
    let log = run_episode(Method::MpcNominal, &scenario, &cfg, 0).unwrap();
    let worst = log
        .records
        .iter()
        .map(|r| (0..3).map(|k| (r.state[k] - r.reference[k]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let span = log.records.len() as f64 * cfg.sim.dt_plant_s;
    verdict(
        !log.failed && span >= 8.0 - 1e-9 && worst < 0.01 && secs < 60.0,
        format!("max position error {worst:.2e} m over {span:.1} s, {secs:.1} s"),
    )
}

/// What the acceptance checks keep from the full grid.
struct GridRun {
    results: Vec<EpisodeResult>,
    /// Logs of the R=3, v=1 scenario by (method, seed).
    focus: BTreeMap<(Method, u64), EpisodeLog>,
    /// Offline models of the R=3, v=1 scenario by seed.
    offline: BTreeMap<u64, Arc<EnsembleModel>>,
    /// Events of every online episode.
    online_events: Vec<Vec<Event>>,
    secs: f64,
}

fn run_full_grid(cfg: &ExperimentConfig) -> GridRun {
    let start = Instant::now();
    let mut focus = BTreeMap::new();
    let mut offline = BTreeMap::new();
    let mut online_events = Vec::new();
    let results = run_grid(cfg, &mut |a| {
        if a.method == Method::KnodeOnline {
            online_events.push(a.log.events.clone());
        }
        if a.scenario.reference.radius_m == 3.0 && a.scenario.reference.speed_m_per_s == 1.0 {
            focus.insert((a.method, a.seed), a.log.clone());
            if a.method == Method::KnodeOffline {
                offline.insert(a.seed, Arc::clone(&a.models[0]));
            }
        }
        Ok(())
    })
    .unwrap();
    GridRun {
        results,
        focus,
        offline,
        online_events,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn cell_medians(results: &[EpisodeResult]) -> BTreeMap<(u64, u64, Method), f64> {
    let mut groups: BTreeMap<(u64, u64, Method), Vec<f64>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.radius_m.to_bits(), r.speed_m_per_s.to_bits(), r.method))
            .or_default()
            .push(r.full.overall);
    }
    groups.into_iter().map(|(k, v)| (k, median(&v))).collect()
}

fn online_adaptation(cfg: &ExperimentConfig, grid: &GridRun) -> Verdict {
    let medians = cell_medians(&grid.results);
    let cells: Vec<(f64, f64)> = cfg
        .grid
        .radii_m
        .iter()
        .flat_map(|&r| cfg.grid.speeds_m_per_s.iter().map(move |&v| (r, v)))
        .collect();
    let get = |r: f64, v: f64, m: Method| medians[&(r.to_bits(), v.to_bits(), m)];
    let (mut beat_nominal, mut beat_offline, mut beat_geometric) = (0, 0, 0);
    for &(r, v) in &cells {
        let ours = get(r, v, Method::KnodeOnline);
        beat_nominal += usize::from(ours < get(r, v, Method::MpcNominal));
        beat_offline += usize::from(ours < get(r, v, Method::KnodeOffline));
        beat_geometric += usize::from(ours < get(r, v, Method::Geometric));
    }
    let average = |m: Method| {
        let v: Vec<f64> = grid.results.iter().filter(|r| r.method == m).map(|r| r.full.overall).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let improvement = 100.0 * (average(Method::MpcNominal) - average(Method::KnodeOnline)) / average(Method::MpcNominal);
    let seeds = cfg.grid.seeds.len();
    let failures = grid.results.iter().filter(|r| r.failed).count();
    let n = cells.len();
    verdict(
        n == 9
            && seeds >= 5
            && failures == 0
            && beat_nominal == n
            && beat_offline >= 7
            && beat_geometric >= 7
            && improvement >= 10.0
            && grid.secs < 1800.0,
        format!(
            "online median below nominal in {beat_nominal}/{n} cells, below offline in {beat_offline}/{n}, below geometric in {beat_geometric}/{n}; \
             grid-average improvement over nominal {improvement:.1}%; {seeds} seeds, {failures} failed episodes, {:.0} s",
            grid.secs
        ),
    )
}

fn offline_limitation(cfg: &ExperimentConfig, grid: &GridRun) -> Verdict {
    let dt = cfg.sim.dt_plant_s;
    let nominal = &grid.focus[&(Method::MpcNominal, cfg.grid.seeds[0])];
    let light = segment_batch(nominal, 2.0, 5.0, dt).unwrap();
    let heavy = segment_batch(nominal, 5.0, 8.0, dt).unwrap();
    let (mut loss_wins, mut track_wins) = (0, 0);
    let mut details = Vec::new();
    for &seed in &cfg.grid.seeds {
        let model = &grid.offline[&seed];
        let l_light = knode_loss(model, &light, 0.0).unwrap();
        let l_heavy = knode_loss(model, &heavy, 0.0).unwrap();
        loss_wins += usize::from(l_heavy > l_light);
        let post = |m: Method| mse(&grid.focus[&(m, seed)], 5.0, 8.0).unwrap().overall;
        let (on, off) = (post(Method::KnodeOnline), post(Method::KnodeOffline));
        track_wins += usize::from(on < off);
        details.push(format!("s{seed}: loss {l_light:.2e}/{l_heavy:.2e}, post-5s {on:.2e}/{off:.2e}"));
    }
    let n = cfg.grid.seeds.len();
    let need = (4 * n).div_ceil(5);
    verdict(
        loss_wins >= need && track_wins >= need,
        format!(
            "offline loss higher on x1.33 data in {loss_wins}/{n} seeds, online post-5 s MSE lower in {track_wins}/{n} \
             (light/heavy loss, online/offline MSE: {})",
            details.join("; ")
        ),
    )
}

fn queue() -> Verdict {
    let cfg = TrainConfig {
        epochs: 20,
        ..Default::default()
    };
    let mut model = EnsembleModel::new(QuadParams::default(), 3, &DEFAULT_LAYER_DIMS).unwrap();
    let mut newest: Vec<Mlp> = Vec::new();
    let mut frozen_ok = true;
    for k in 0..4 {
        let before: Vec<Vec<u64>> =
            model.members().map(|m| m.params().iter().map(|v| v.to_bits()).collect()).collect();
        let (next, _) = train_member(&model, &flight_batch(0.5 + 0.2 * k as f64, 60, 40 + k), &cfg).unwrap();
        // members that survive keep their bits
        let after: Vec<Vec<u64>> = next.members().map(|m| m.params().iter().map(|v| v.to_bits()).collect()).collect();
        let survivors = before.len().min(2);
        frozen_ok &= after[..survivors] == before[before.len() - survivors..];
        newest.push(next.newest().unwrap().clone());
        model = next;
    }
    let kept: Vec<&Mlp> = model.members().collect();
    let expected: Vec<&Mlp> = newest[1..].iter().collect();
    let weights = model.weights();
    let exact = weights == vec![(-2.0f64).exp(), (-1.0f64).exp(), 1.0];
    // the composite field uses the same weights
    let mut r = rng(5);
    let z = random_augmented(&mut r);
    let mut field = EnsembleModel::new(QuadParams::default(), 3, &DEFAULT_LAYER_DIMS).unwrap().hybrid_derivative(&z).unwrap();
    for (w, net) in weights.iter().zip(model.members()) {
        let out = net.forward(z.as_slice()).unwrap();
        for k in 0..13 {
            field[k] += w * out[k];
        }
    }
    let composite_ok = (model.hybrid_derivative(&z).unwrap() - field).amax() < 1e-12;
    verdict(
        model.len() == 3 && kept == expected && frozen_ok && exact && composite_ok && model.version() == 4,
        format!(
            "members {}, first evicted {}, frozen bitwise {frozen_ok}, weights by age {:?}",
            model.len(),
            kept == expected,
            model.ages().iter().zip(&weights).map(|(a, w)| format!("{a}:{w:.6}")).collect::<Vec<_>>()
        ),
    )
}

fn batching(grid: &GridRun) -> Verdict {
    // timeline replay on random swap patterns
    let n_col = 75;
    let mut runner = TestRunner::new(RunnerConfig {
        cases: 256,
        ..RunnerConfig::default()
    });
    let strategy = (1usize..1200, proptest::collection::vec(proptest::bool::weighted(0.01), 1200));
    let replay = runner.run(&strategy, |(steps, swaps)| {
        let mut c = CollectorState::new(0.15, 0.002, steps as f64 * 0.002).unwrap();
        let (mut start, mut version, mut buffer) = (0usize, 0u64, Vec::<usize>::new());
        for k in 0..steps {
            if k > 0 && swaps[k] {
                version += 1;
                prop_assert_eq!(c.on_model_published(k as f64 * 0.002), buffer.len());
                buffer.clear();
                start = k;
            }
            let due = k > 0 && k - start >= n_col;
            let out = c
                .collector_step(Sample {
                    t: k as f64 * 0.002,
                    state: QuadState::default(),
                    control: ControlInput::new(0.3, Vector3::zeros()),
                    model_version: version,
                })
                .unwrap();
            match out {
                CollectorOutcome::Emitted(b) => {
                    prop_assert!(due && !buffer.is_empty());
                    prop_assert_eq!(b.len(), n_col);
                    prop_assert!((b.duration() - 0.15).abs() < 1e-12);
                    prop_assert!(b.is_clean() && b.model_version() == version);
                    prop_assert_eq!((b.start_time() / 0.002).round() as usize, buffer[0]);
                }
                CollectorOutcome::Idle => prop_assert!(!due || buffer.is_empty()),
                CollectorOutcome::Discarded { .. } => prop_assert!(false, "consecutive samples never discard"),
            }
            if due {
                buffer.clear();
                start = k;
            }
            buffer.push(k);
        }
        Ok(())
    });

    // a window where the controller changed without a swap notice is dropped
    let mut c = CollectorState::new(0.15, 0.002, 1.0).unwrap();
    let mut mixed_dropped = false;
    for k in 0..=75 {
        let s = Sample {
            t: k as f64 * 0.002,
            state: QuadState::default(),
            control: ControlInput::new(0.3, Vector3::zeros()),
            model_version: u64::from(k >= 30),
        };
        mixed_dropped |= matches!(c.collector_step(s).unwrap(), CollectorOutcome::Discarded { .. });
    }

    // every batch of the grid's online runs
    let (mut saved, mut bad) = (0, 0);
    for events in &grid.online_events {
        let swaps: Vec<f64> = events
            .iter()
            .filter_map(|e| matches!(e.kind, EventKind::ModelSwapped { .. }).then_some(e.t))
            .collect();
        for e in events {
            if let EventKind::BatchSaved { samples, .. } = e.kind {
                saved += 1;
                let from = e.t - 0.15;
                if samples != 75 || swaps.iter().any(|&s| s > from + 1e-9 && s < e.t - 1e-9) {
                    bad += 1;
                }
            }
        }
    }
    verdict(
        replay.is_ok() && mixed_dropped && bad == 0 && saved > 0,
        format!(
            "replay oracle {} on 256 timelines, mixed window dropped {mixed_dropped}, {saved} grid batches with {bad} violations",
            if replay.is_ok() { "agrees" } else { "disagrees" }
        ),
    )
}

fn determinism() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.grid.radii_m = vec![3.0];
    cfg.grid.speeds_m_per_s = vec![1.0];
    cfg.grid.seeds = vec![0, 1];
    let run = || {
        let mut logs = Vec::new();
        let results = run_grid(&cfg, &mut |a| {
            logs.push(a.log.clone());
            Ok(())
        })
        .unwrap();
        (logs, ResultTable::from_results(&results), results)
    };
    let (la, ta, ra) = run();
    let (lb, tb, rb) = run();
    let bits = |rs: &[EpisodeResult]| -> Vec<u64> { rs.iter().map(|r| r.full.overall.to_bits()).collect() };
    let same_logs = la == lb && la.iter().zip(&lb).all(|(a, b)| a.to_record_text() == b.to_record_text());
    let same_tables = ta.render_text() == tb.render_text() && ta.to_csv() == tb.to_csv() && bits(&ra) == bits(&rb);
    verdict(
        same_logs && same_tables,
        format!("{} episode logs identical {same_logs}, result tables identical {same_tables}", la.len()),
    )
}

fn checkpoint() -> Verdict {
    let model = random_model(21, 3, 4);
    let back = checkpoint_from_str(&checkpoint_to_string(&model), Path::new("mem")).unwrap();
    let mut r = rng(22);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let z = random_augmented(&mut r);
        let a = model.hybrid_derivative(&z).unwrap();
        let b = back.hybrid_derivative(&z).unwrap();
        mismatches += usize::from(a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()));
    }
    verdict(
        model.len() == 3 && back == model && mismatches == 0,
        format!("{} members, {mismatches}/1000 inputs differ", back.len()),
    )
}

fn main() {
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!("criterion {n} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((n, name, v));
    };
    report(1, "gradient vs finite differences", gradient());
    report(2, "solver vs LQR", lqr());
    report(3, "hover hold", hover());

    let cfg = ExperimentConfig::default();
    let grid = run_full_grid(&cfg);
    report(4, "online adaptation on the grid", online_adaptation(&cfg, &grid));
    report(5, "offline model limitation", offline_limitation(&cfg, &grid));
    report(6, "queue semantics", queue());
    report(7, "batching", batching(&grid));
    report(8, "determinism", determinism());
    report(9, "checkpoint round trip", checkpoint());

    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.2.pass).map(|v| v.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", verdicts.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
