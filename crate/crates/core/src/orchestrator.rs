//! Online data collection and the trainer handoff.
//!
//! The control task appends one sample per plant step. Every `t_col` seconds
//! the buffer is emitted as a batch, unless a model swap happened inside the
//! window, in which case the buffer is dropped: a batch must come from a single
//! controller. Emitted batches go to a capacity-one, newest-wins mailbox; the
//! trainer fits one new residual member per batch and publishes the resulting
//! snapshot after a simulated training latency. The controller picks up a
//! published snapshot only at a control-step boundary.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, QuadState};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::log::{Event, EventKind};
use crate::trainer::{train_member, LossReport, TrainConfig};

/// Tolerance for comparing times built from integer step counts.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub state: QuadState,
    pub control: ControlInput,
    pub model_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    samples: Vec<Sample>,
    dt: f64,
    model_version: u64,
    clean: bool,
}

impl DataBatch {
    pub fn new(samples: Vec<Sample>, dt: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("a batch needs at least one sample".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("sampling interval must be positive, got {dt}")));
        }
        for w in samples.windows(2) {
            if ((w[1].t - w[0].t) - dt).abs() > TIME_EPS {
                return Err(Error::InvalidArgument(format!(
                    "samples at {} and {} are not spaced by {dt}",
                    w[0].t, w[1].t
                )));
            }
        }
        let model_version = samples[0].model_version;
        let clean = samples.iter().all(|s| s.model_version == model_version);
        Ok(Self {
            samples,
            dt,
            model_version,
            clean,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn model_version(&self) -> u64 {
        self.model_version
    }

    pub fn is_clean(&self) -> bool {
        self.clean
    }

    /// Time covered by the batch: one sampling interval per sample.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.dt
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CollectorOutcome {
    Idle,
    Emitted(DataBatch),
    Discarded { samples: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct CollectorState {
    t_s: f64,
    t_col: f64,
    dt: f64,
    t_total: f64,
    buffer: Vec<Sample>,
    last_t: Option<f64>,
}

impl CollectorState {
    pub fn new(t_col: f64, dt: f64, t_total: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::config("sim.dt_plant_s", "must be positive"));
        }
        if !(t_col > 0.0) {
            return Err(Error::config("orchestrator.t_col_s", "must be positive"));
        }
        let ratio = t_col / dt;
        if (ratio - ratio.round()).abs() > 1e-6 {
            return Err(Error::config(
                "orchestrator.t_col_s",
                format!("must be an integer multiple of the plant step {dt}"),
            ));
        }
        Ok(Self {
            t_s: 0.0,
            t_col,
            dt,
            t_total,
            buffer: Vec::new(),
            last_t: None,
        })
    }

    pub fn last_save_time(&self) -> f64 {
        self.t_s
    }

    pub fn t_col(&self) -> f64 {
        self.t_col
    }

    pub fn t_total(&self) -> f64 {
        self.t_total
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Saves the buffer when a full collection interval has elapsed since the
    /// last save or model swap, then appends `sample`.
    pub fn collector_step(&mut self, sample: Sample) -> Result<CollectorOutcome> {
        let t_i = sample.t;
        if let Some(prev) = self.last_t {
            if t_i < prev {
                return Err(Error::InvalidArgument(format!(
                    "sample at {t_i} arrived after one at {prev}"
                )));
            }
        }
        self.last_t = Some(t_i);

        let elapsed = t_i - self.t_s;
        let mut outcome = CollectorOutcome::Idle;
        if t_i != 0.0 && elapsed >= self.t_col - 0.5 * self.dt {
            let buffer = std::mem::take(&mut self.buffer);
            self.t_s = t_i;
            let n = buffer.len();
            outcome = if elapsed > self.t_col + 0.5 * self.dt {
                CollectorOutcome::Discarded {
                    samples: n,
                    reason: "gap".into(),
                }
            } else if n == 0 {
                CollectorOutcome::Idle
            } else {
                let batch = DataBatch::new(buffer, self.dt)?;
                if batch.is_clean() {
                    CollectorOutcome::Emitted(batch)
                } else {
                    CollectorOutcome::Discarded {
                        samples: n,
                        reason: "mixed".into(),
                    }
                }
            };
        }
        self.buffer.push(sample);
        Ok(outcome)
    }

    /// The controller swapped models at `t_i`: restart the window and drop the
    /// partial buffer. Returns how many samples were dropped.
    pub fn on_model_published(&mut self, t_i: f64) -> usize {
        self.t_s = t_i;
        let n = self.buffer.len();
        self.buffer.clear();
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerMode {
    /// Every event runs on the simulated clock in the calling thread.
    #[default]
    Synchronous,
    /// Training runs on a worker thread; results are collected when their
    /// simulated completion time arrives.
    Concurrent,
}

type TrainOutcome = Result<(EnsembleModel, LossReport)>;

struct Job {
    model: Arc<EnsembleModel>,
    batch: DataBatch,
    cfg: TrainConfig,
}

struct Worker {
    jobs: Option<Sender<Job>>,
    results: Receiver<TrainOutcome>,
    handle: Option<JoinHandle<()>>,
}

impl Worker {
    fn spawn() -> Self {
        let (job_tx, job_rx) = mpsc::channel::<Job>();
        let (res_tx, res_rx) = mpsc::channel();
        let handle = std::thread::spawn(move || {
            for job in job_rx {
                let out = train_member(&job.model, &job.batch, &job.cfg);
                if res_tx.send(out).is_err() {
                    break;
                }
            }
        });
        Self {
            jobs: Some(job_tx),
            results: res_rx,
            handle: Some(handle),
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

struct InFlight {
    due: f64,
    /// Present in synchronous mode, where training runs at submission.
    result: Option<TrainOutcome>,
}

/// Capacity-one handoff between the control task and the trainer, plus the
/// latest published snapshot.
pub struct TrainerMailbox {
    pending: Option<DataBatch>,
    published: Arc<EnsembleModel>,
    training_latency: f64,
    cfg: TrainConfig,
    in_flight: Option<InFlight>,
    worker: Option<Worker>,
}

impl std::fmt::Debug for TrainerMailbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainerMailbox")
            .field("pending", &self.pending.as_ref().map(|b| (b.model_version(), b.len())))
            .field("published_version", &self.published.version())
            .field("training_latency", &self.training_latency)
            .field("busy", &self.in_flight.is_some())
            .finish()
    }
}

impl TrainerMailbox {
    pub fn new(initial: Arc<EnsembleModel>, training_latency: f64, cfg: TrainConfig, mode: SchedulerMode) -> Self {
        Self {
            pending: None,
            published: initial,
            training_latency,
            cfg,
            in_flight: None,
            worker: match mode {
                SchedulerMode::Synchronous => None,
                SchedulerMode::Concurrent => Some(Worker::spawn()),
            },
        }
    }

    pub fn published(&self) -> &Arc<EnsembleModel> {
        &self.published
    }

    pub fn pending(&self) -> Option<&DataBatch> {
        self.pending.as_ref()
    }

    pub fn is_training(&self) -> bool {
        self.in_flight.is_some()
    }

    /// Places a batch in the slot, replacing any batch still waiting there,
    /// then lets the trainer pick it up if idle.
    pub fn submit(&mut self, batch: DataBatch, now: f64, events: &mut Vec<Event>) {
        if let Some(old) = self.pending.replace(batch) {
            events.push(Event::new(
                now,
                EventKind::BatchSuperseded {
                    model_version: old.model_version(),
                },
            ));
        }
        self.trainer_loop_step(now, events);
    }

    /// One iteration of the trainer loop: wait when there is nothing to do or
    /// a training run is in flight; otherwise start training on the waiting
    /// batch, to be published `training_latency` seconds later.
    pub fn trainer_loop_step(&mut self, now: f64, events: &mut Vec<Event>) {
        if self.in_flight.is_some() {
            return;
        }
        let Some(batch) = self.pending.take() else {
            return;
        };
        if batch.model_version() != self.published.version() {
            events.push(Event::new(
                now,
                EventKind::BatchStale {
                    model_version: batch.model_version(),
                },
            ));
            return;
        }
        events.push(Event::new(
            now,
            EventKind::TrainingStarted {
                model_version: batch.model_version(),
            },
        ));
        let due = now + self.training_latency;
        let result = match &self.worker {
            None => Some(train_member(&self.published, &batch, &self.cfg)),
            Some(w) => {
                let job = Job {
                    model: Arc::clone(&self.published),
                    batch,
                    cfg: self.cfg.clone(),
                };
                match w.jobs.as_ref().map(|tx| tx.send(job)) {
                    Some(Ok(())) => None,
                    _ => Some(Err(Error::TrainingAborted("trainer thread unavailable".into()))),
                }
            }
        };
        self.in_flight = Some(InFlight { due, result });
    }

    /// Publishes a finished training run whose completion time has come.
    /// Returns true when a new snapshot was published.
    pub fn poll(&mut self, now: f64, events: &mut Vec<Event>) -> bool {
        let due = match &self.in_flight {
            Some(f) if f.due <= now + TIME_EPS => true,
            _ => false,
        };
        if !due {
            return false;
        }
        let flight = self.in_flight.take().expect("checked above");
        let outcome = match flight.result {
            Some(r) => r,
            None => match self.worker.as_ref().map(|w| w.results.recv()) {
                Some(Ok(r)) => r,
                _ => Err(Error::TrainingAborted("trainer thread exited".into())),
            },
        };
        let published = match outcome {
            Ok((model, report)) => {
                events.push(Event::new(
                    now,
                    EventKind::ModelPublished {
                        version: model.version(),
                        members: model.len(),
                        initial_loss: report.initial_loss,
                        final_loss: report.final_loss,
                    },
                ));
                self.published = Arc::new(model);
                true
            }
            Err(e) => {
                events.push(Event::new(now, EventKind::TrainingAborted { reason: e.to_string() }));
                false
            }
        };
        self.trainer_loop_step(now, events);
        published
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrchestratorConfig {
    pub t_col_s: f64,
    pub training_latency_s: f64,
    pub scheduler: SchedulerMode,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            t_col_s: 0.15,
            training_latency_s: 0.05,
            scheduler: SchedulerMode::Synchronous,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self, dt_plant: f64) -> Result<()> {
        CollectorState::new(self.t_col_s, dt_plant, f64::INFINITY)?;
        if !(self.training_latency_s >= 0.0 && self.training_latency_s.is_finite()) {
            return Err(Error::config("orchestrator.training_latency_s", "must be non-negative"));
        }
        Ok(())
    }
}

/// Collector, mailbox and the controller's current snapshot, driven one plant
/// step at a time by the episode loop.
pub struct OnlineLearner {
    collector: CollectorState,
    mailbox: TrainerMailbox,
    active: Arc<EnsembleModel>,
}

impl OnlineLearner {
    pub fn new(
        initial: Arc<EnsembleModel>,
        cfg: &OrchestratorConfig,
        train: TrainConfig,
        dt_plant: f64,
        t_total: f64,
    ) -> Result<Self> {
        cfg.validate(dt_plant)?;
        train.validate()?;
        Ok(Self {
            collector: CollectorState::new(cfg.t_col_s, dt_plant, t_total)?,
            mailbox: TrainerMailbox::new(Arc::clone(&initial), cfg.training_latency_s, train, cfg.scheduler),
            active: initial,
        })
    }

    /// Model the controller uses for the step at `t`. Finished training runs
    /// are published first; the controller adopts the latest snapshot only at
    /// a control boundary.
    pub fn begin_step(&mut self, t: f64, control_boundary: bool, events: &mut Vec<Event>) -> Arc<EnsembleModel> {
        self.mailbox.poll(t, events);
        if control_boundary && self.mailbox.published().version() != self.active.version() {
            self.active = Arc::clone(self.mailbox.published());
            events.push(Event::new(
                t,
                EventKind::ModelSwapped {
                    version: self.active.version(),
                },
            ));
            let dropped = self.collector.on_model_published(t);
            if dropped > 0 {
                events.push(Event::new(
                    t,
                    EventKind::BatchDiscarded {
                        samples: dropped,
                        reason: "model-swap".into(),
                    },
                ));
            }
        }
        Arc::clone(&self.active)
    }

    /// Records the sample applied at this step.
    pub fn record(&mut self, state: QuadState, control: ControlInput, t: f64, events: &mut Vec<Event>) -> Result<()> {
        let sample = Sample {
            t,
            state,
            control,
            model_version: self.active.version(),
        };
        match self.collector.collector_step(sample)? {
            CollectorOutcome::Idle => {}
            CollectorOutcome::Emitted(batch) => {
                events.push(Event::new(
                    t,
                    EventKind::BatchSaved {
                        model_version: batch.model_version(),
                        samples: batch.len(),
                    },
                ));
                self.mailbox.submit(batch, t, events);
            }
            CollectorOutcome::Discarded { samples, reason } => {
                events.push(Event::new(t, EventKind::BatchDiscarded { samples, reason }));
            }
        }
        Ok(())
    }

    pub fn active(&self) -> &Arc<EnsembleModel> {
        &self.active
    }

    /// Latest model the trainer has published, possibly not yet adopted.
    pub fn published(&self) -> &Arc<EnsembleModel> {
        self.mailbox.published()
    }
}
