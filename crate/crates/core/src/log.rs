//! Closed-loop time histories and the event timeline of one episode.

use std::fmt::Write as _;

use crate::dynamics::{ControlVector, StateVector};

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    MassChange { multiplier: f64 },
    BatchSaved { model_version: u64, samples: usize },
    BatchDiscarded { samples: usize, reason: String },
    TrainingStarted { model_version: u64 },
    /// A batch waiting for the trainer was replaced by a newer one.
    BatchSuperseded { model_version: u64 },
    /// A waiting batch was collected under an older controller than the one now published.
    BatchStale { model_version: u64 },
    ModelPublished { version: u64, members: usize, initial_loss: f64, final_loss: f64 },
    ModelSwapped { version: u64 },
    TrainingAborted { reason: String },
    Failure { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

impl Event {
    pub fn new(t: f64, kind: EventKind) -> Self {
        Self { t, kind }
    }

    /// Single-line rendering used in summaries.
    pub fn render(&self) -> String {
        let body = match &self.kind {
            EventKind::MassChange { multiplier } => format!("mass_change multiplier={multiplier:.16e}"),
            EventKind::BatchSaved { model_version, samples } => {
                format!("batch_saved version={model_version} samples={samples}")
            }
            EventKind::BatchDiscarded { samples, reason } => format!("batch_discarded samples={samples} reason={reason}"),
            EventKind::TrainingStarted { model_version } => format!("training_started version={model_version}"),
            EventKind::BatchSuperseded { model_version } => format!("batch_superseded version={model_version}"),
            EventKind::BatchStale { model_version } => format!("batch_stale version={model_version}"),
            EventKind::ModelPublished {
                version,
                members,
                initial_loss,
                final_loss,
            } => format!(
                "model_published version={version} members={members} initial_loss={initial_loss:.16e} final_loss={final_loss:.16e}"
            ),
            EventKind::ModelSwapped { version } => format!("model_swapped version={version}"),
            EventKind::TrainingAborted { reason } => format!("training_aborted reason={reason}"),
            EventKind::Failure { reason } => format!("failure reason={reason}"),
        };
        format!("{:.6} {}", self.t, body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolverDiagnostics {
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub state: StateVector,
    pub reference: StateVector,
    pub control: ControlVector,
    pub solver: SolverDiagnostics,
    pub model_version: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeLog {
    pub method: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub records: Vec<StepRecord>,
    pub events: Vec<Event>,
    pub failed: bool,
}

pub const RECORD_SCHEMA: &str = "knode-mpc-records v1";

pub const RECORD_COLUMNS: [&str; 35] = [
    "t", "x", "y", "z", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz", "ref_x", "ref_y", "ref_z",
    "ref_vx", "ref_vy", "ref_vz", "ref_qw", "ref_qx", "ref_qy", "ref_qz", "ref_wx", "ref_wy", "ref_wz", "thrust",
    "tau_x", "tau_y", "tau_z", "cost", "iterations", "converged", "model_version",
];

impl EpisodeLog {
    pub fn count_events(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.kind)).count()
    }

    /// Line-oriented record file: schema line, header, one line per plant step.
    pub fn to_record_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{RECORD_SCHEMA}").unwrap();
        writeln!(s, "{}", RECORD_COLUMNS.join(",")).unwrap();
        for r in &self.records {
            write!(s, "{:.16e}", r.t).unwrap();
            for v in r.state.iter().chain(r.reference.iter()).chain(r.control.iter()) {
                write!(s, ",{v:.16e}").unwrap();
            }
            writeln!(
                s,
                ",{:.16e},{},{},{}",
                r.solver.cost, r.solver.iterations, r.solver.converged as u8, r.model_version
            )
            .unwrap();
        }
        s
    }
}
