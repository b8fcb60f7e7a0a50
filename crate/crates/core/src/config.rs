//! Experiment configuration. Every constant the controllers, learner and
//! simulator use lives here, with units spelled out in the key names.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{QuadParams, STANDARD_GRAVITY};
use crate::ensemble::{EnsembleModel, DEFAULT_LAYER_DIMS};
use crate::error::{Error, Result};
use crate::mpc::MpcSettings;
use crate::orchestrator::OrchestratorConfig;
use crate::sim::{GeoGains, MassSchedule, Method};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadConfig {
    pub mass_kg: f64,
    pub inertia_diag_kg_m2: [f64; 3],
    pub gravity_m_per_s2: f64,
    /// Thrust upper bound as a multiple of the nominal hover thrust.
    pub thrust_max_hover_ratio: f64,
    pub moment_max_n_m: [f64; 3],
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            mass_kg: 0.032,
            inertia_diag_kg_m2: [1.4e-5, 1.4e-5, 2.2e-5],
            gravity_m_per_s2: STANDARD_GRAVITY,
            thrust_max_hover_ratio: 2.0,
            moment_max_n_m: [2e-3, 2e-3, 2e-3],
        }
    }
}

impl QuadConfig {
    pub fn params(&self) -> Result<QuadParams> {
        if !(self.gravity_m_per_s2 > 0.0 && self.gravity_m_per_s2.is_finite()) {
            return Err(Error::config("quad.gravity_m_per_s2", "must be positive"));
        }
        QuadParams::new(
            self.mass_kg,
            Matrix3::from_diagonal(&Vector3::from(self.inertia_diag_kg_m2)),
            Vector3::new(0.0, 0.0, -self.gravity_m_per_s2),
        )
        .and_then(|p| p.with_control_limits(self.thrust_max_hover_ratio, Vector3::from(self.moment_max_n_m)))
        .map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("quad.{field}"), message),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub capacity: usize,
    pub layer_dims: Vec<usize>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            capacity: 3,
            layer_dims: DEFAULT_LAYER_DIMS.to_vec(),
        }
    }
}

impl EnsembleConfig {
    pub fn empty_model(&self, nominal: QuadParams) -> Result<EnsembleModel> {
        EnsembleModel::new(nominal, self.capacity, &self.layer_dims).map_err(|e| match e {
            Error::InvalidArgument(m) | Error::Format { message: m, .. } => Error::config("ensemble", m),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt_plant_s: f64,
    pub t_final_s: f64,
    pub altitude_m: f64,
    pub center_m: [f64; 2],
    pub mass_schedule: MassSchedule,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_plant_s: 0.002,
            t_final_s: 8.0,
            altitude_m: 0.0,
            center_m: [0.0, 0.0],
            mass_schedule: MassSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    /// Nominal-MPC data before this time trains the offline member.
    pub collect_until_s: f64,
    /// Keep every k-th transition of the collected data.
    pub transition_stride: usize,
    /// Deploy this checkpoint instead of training per scenario and seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            collect_until_s: 5.0,
            transition_stride: 5,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub radii_m: Vec<f64>,
    pub speeds_m_per_s: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            radii_m: vec![2.0, 3.0, 4.0],
            speeds_m_per_s: vec![0.8, 1.0, 1.2],
            methods: Method::ALL.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: String,
    pub quad: QuadConfig,
    pub ensemble: EnsembleConfig,
    pub trainer: TrainConfig,
    pub mpc: MpcSettings,
    pub orchestrator: OrchestratorConfig,
    pub sim: SimConfig,
    pub offline: OfflineConfig,
    pub geometric: GeoGains,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: "results".into(),
            quad: QuadConfig::default(),
            ensemble: EnsembleConfig::default(),
            trainer: TrainConfig::default(),
            mpc: MpcSettings::default(),
            orchestrator: OrchestratorConfig::default(),
            sim: SimConfig::default(),
            offline: OfflineConfig::default(),
            geometric: GeoGains::default(),
            grid: GridConfig::default(),
        }
    }
}

fn multiple_of(value: f64, step: f64) -> bool {
    let r = value / step;
    r.round() >= 1.0 && (r - r.round()).abs() < 1e-9
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(String::new, |s| {
                let line = text[..s.start].lines().count().max(1);
                format!("line {line}")
            });
            Error::config(if field.is_empty() { "<document>".into() } else { field }, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let params = self.quad.params()?;
        self.ensemble.empty_model(params.clone())?;
        self.trainer.validate()?;

        let dt = self.sim.dt_plant_s;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config("sim.dt_plant_s", "must be positive"));
        }
        if !(self.sim.t_final_s > 0.0 && self.sim.t_final_s.is_finite()) {
            return Err(Error::config("sim.t_final_s", "must be positive"));
        }
        if !multiple_of(self.sim.t_final_s, dt) {
            return Err(Error::config("sim.t_final_s", "must be a multiple of sim.dt_plant_s"));
        }
        if !self.sim.altitude_m.is_finite() || self.sim.center_m.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("sim.center_m", "must be finite"));
        }
        self.sim.mass_schedule.validate()?;

        if !(self.mpc.dt_mpc_s > 0.0) || !multiple_of(self.mpc.dt_mpc_s, dt) {
            return Err(Error::config("mpc.dt_mpc_s", "must be a positive multiple of sim.dt_plant_s"));
        }
        self.mpc.ocp_config(&params)?;
        self.orchestrator.validate(dt)?;
        self.geometric.validate()?;

        if self.offline.transition_stride == 0 {
            return Err(Error::config("offline.transition_stride", "must be at least 1"));
        }
        if !(self.offline.collect_until_s > 0.0) || !multiple_of(self.offline.collect_until_s, dt) {
            return Err(Error::config("offline.collect_until_s", "must be a positive multiple of sim.dt_plant_s"));
        }

        let g = &self.grid;
        if g.radii_m.is_empty() || g.radii_m.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::config("grid.radii_m", "need at least one positive radius"));
        }
        if g.speeds_m_per_s.is_empty() || g.speeds_m_per_s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("grid.speeds_m_per_s", "need at least one non-negative speed"));
        }
        if g.methods.is_empty() {
            return Err(Error::config("grid.methods", "need at least one method"));
        }
        if g.seeds.is_empty() {
            return Err(Error::config("grid.seeds", "need at least one seed"));
        }
        Ok(())
    }

    /// The offline data window must fit inside the run. Checked by the entry
    /// points that need offline data, so short single-method runs stay valid.
    pub fn check_offline_window(&self) -> Result<()> {
        if self.offline.collect_until_s > self.sim.t_final_s + 1e-9 {
            return Err(Error::config(
                "offline.collect_until_s",
                format!(
                    "offline data window ({} s) exceeds sim.t_final_s ({} s)",
                    self.offline.collect_until_s, self.sim.t_final_s
                ),
            ));
        }
        Ok(())
    }

    /// FNV-1a over the canonical serialization.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn partial_document_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str("output_dir = \"out\"\n[grid]\nradii_m = [3.0]\nspeeds_m_per_s = [1.0]\nmethods = [\"geometric\"]\nseeds = [7]\n").unwrap();
        assert_eq!(cfg.grid.seeds, vec![7]);
        assert_eq!(cfg.mpc, MpcSettings::default());
    }

    #[test]
    fn multiplicity_violations_name_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.mpc.dt_mpc_s = 0.021;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "mpc.dt_mpc_s"),
            other => panic!("{other:?}"),
        }
        let mut cfg = ExperimentConfig::default();
        cfg.orchestrator.t_col_s = 0.151;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "orchestrator.t_col_s"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_run_rejects_offline_window() {
        let mut cfg = ExperimentConfig::default();
        cfg.sim.t_final_s = 4.0;
        cfg.validate().unwrap();
        match cfg.check_offline_window() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "offline.collect_until_s"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("[mpc]\nhorizon_steps = 3\n"),
            Err(Error::Config { .. })
        ));
    }
}
