//! Runs every (radius, speed, method, seed) combination of the configured grid.

use std::path::Path;
use std::sync::Arc;

use crate::checkpoint::load_checkpoint;
use crate::config::ExperimentConfig;
use crate::ensemble::EnsembleModel;
use crate::error::Result;
use crate::log::{EpisodeLog, Event, EventKind};
use crate::report::EpisodeResult;
use crate::sim::{mse, offline_from_log, run_episode_observed, Method, MseSummary, Scenario};

/// Start of the post-change window: the first mass breakpoint inside the run.
pub fn post_change_start(scenario: &Scenario) -> f64 {
    scenario
        .schedule
        .breakpoints_s
        .iter()
        .copied()
        .find(|&b| b > 0.0 && b < scenario.t_final_s)
        .unwrap_or(0.0)
}

const NAN_MSE: MseSummary = MseSummary {
    overall: f64::NAN,
    x: f64::NAN,
    y: f64::NAN,
    z: f64::NAN,
};

pub fn episode_result(scenario: &Scenario, method: Method, seed: u64, log: &EpisodeLog) -> EpisodeResult {
    let t_end = scenario.t_final_s;
    EpisodeResult {
        radius_m: scenario.reference.radius_m,
        speed_m_per_s: scenario.reference.speed_m_per_s,
        method,
        seed,
        failed: log.failed,
        full: mse(log, 0.0, t_end).unwrap_or(NAN_MSE),
        post: mse(log, post_change_start(scenario), t_end).unwrap_or(NAN_MSE),
    }
}

/// What the grid hands to its observer for every simulated episode.
pub struct EpisodeArtifacts<'a> {
    pub scenario: &'a Scenario,
    pub method: Method,
    pub seed: u64,
    pub log: &'a EpisodeLog,
    /// Starting model of a learned method followed by every published model.
    pub models: &'a [Arc<EnsembleModel>],
}

/// Runs the grid in a fixed order. Methods whose outcome does not depend on the
/// seed are simulated once per scenario and their result is repeated for each
/// seed. The offline method reuses the nominal-MPC flight of the same scenario
/// as its training data. Episode errors become failed results and the grid
/// continues.
pub fn run_grid(
    cfg: &ExperimentConfig,
    observer: &mut dyn FnMut(EpisodeArtifacts<'_>) -> Result<()>,
) -> Result<Vec<EpisodeResult>> {
    cfg.validate()?;
    if cfg.grid.methods.contains(&Method::KnodeOffline) && cfg.offline.checkpoint.is_none() {
        cfg.check_offline_window()?;
    }
    let mut results = Vec::new();
    for &radius in &cfg.grid.radii_m {
        for &speed in &cfg.grid.speeds_m_per_s {
            let scenario = Scenario::from_config(cfg, radius, speed);
            let mut nominal_log: Option<EpisodeLog> = None;
            for &method in &cfg.grid.methods {
                let seeds: &[u64] = if method.is_stochastic() { &cfg.grid.seeds } else { &cfg.grid.seeds[..1] };
                for &seed in seeds {
                    let mut models = Vec::new();
                    let log = run_one(cfg, &scenario, method, seed, &mut nominal_log, &mut models);
                    observer(EpisodeArtifacts {
                        scenario: &scenario,
                        method,
                        seed,
                        log: &log,
                        models: &models,
                    })?;
                    let r = episode_result(&scenario, method, seed, &log);
                    if method.is_stochastic() {
                        results.push(r);
                    } else {
                        results.extend(cfg.grid.seeds.iter().map(|&s| EpisodeResult { seed: s, ..r.clone() }));
                    }
                }
            }
        }
    }
    Ok(results)
}

fn failed_log(method: Method, seed: u64, cfg: &ExperimentConfig, reason: String) -> EpisodeLog {
    EpisodeLog {
        method: method.name().into(),
        seed,
        config_fingerprint: cfg.fingerprint(),
        records: Vec::new(),
        events: vec![Event::new(0.0, EventKind::Failure { reason })],
        failed: true,
    }
}

fn offline_model(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    seed: u64,
    nominal_log: &mut Option<EpisodeLog>,
) -> std::result::Result<Arc<EnsembleModel>, String> {
    if let Some(path) = &cfg.offline.checkpoint {
        return load_checkpoint(Path::new(path)).map(Arc::new).map_err(|e| e.to_string());
    }
    if nominal_log.is_none() {
        let log = run_episode_observed(Method::MpcNominal, scenario, cfg, seed, None, &mut |_| {})
            .map_err(|e| e.to_string())?;
        *nominal_log = Some(log);
    }
    let data = nominal_log.as_ref().expect("nominal flight available");
    if data.failed {
        return Err("nominal data collection failed".into());
    }
    offline_from_log(data, cfg, seed).map(|(m, _)| Arc::new(m)).map_err(|e| e.to_string())
}

fn run_one(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    method: Method,
    seed: u64,
    nominal_log: &mut Option<EpisodeLog>,
    models: &mut Vec<Arc<EnsembleModel>>,
) -> EpisodeLog {
    let initial = if method == Method::KnodeOffline {
        match offline_model(cfg, scenario, seed, nominal_log) {
            Ok(m) => Some(m),
            Err(reason) => return failed_log(method, seed, cfg, reason),
        }
    } else {
        None
    };
    let mut collect = |m: &Arc<EnsembleModel>| models.push(Arc::clone(m));
    match run_episode_observed(method, scenario, cfg, seed, initial, &mut collect) {
        Ok(log) => {
            if method == Method::MpcNominal && nominal_log.is_none() {
                *nominal_log = Some(log.clone());
            }
            log
        }
        Err(e) => failed_log(method, seed, cfg, e.to_string()),
    }
}
