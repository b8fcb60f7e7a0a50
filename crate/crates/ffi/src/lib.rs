//! C ABI over the knode-mpc core.
//!
//! Every fallible function returns a [`KnodeStatus`]. On failure the message
//! is kept per thread and can be copied out with [`knode_last_error_message`].
//! Ensembles are opaque handles created by `knode_ensemble_new` or
//! `knode_ensemble_load` and released with `knode_ensemble_free`.
//!
//! State vectors are 13 doubles `(r, v, q_wxyz, omega)` and control vectors
//! are 4 doubles `(thrust, tau)`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use knode_mpc::checkpoint::{load_checkpoint, save_checkpoint};
use knode_mpc::dynamics::{
    nominal_derivative, AugmentedState, ControlInput, ControlVector, QuadState, StateVector, CONTROL_DIM, STATE_DIM,
};
use knode_mpc::ensemble::DEFAULT_LAYER_DIMS;
use knode_mpc::grid::post_change_start;
use knode_mpc::sim::{mse, run_episode, Method, Scenario};
use knode_mpc::{EnsembleModel, Error, ExperimentConfig, QuadParams};

pub const KNODE_STATE_DIM: usize = 13;
pub const KNODE_CONTROL_DIM: usize = 4;

const _: () = assert!(KNODE_STATE_DIM == STATE_DIM && KNODE_CONTROL_DIM == CONTROL_DIM);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnodeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NonFinite = 3,
    Dimension = 4,
    Config = 5,
    Io = 6,
    Format = 7,
    Schema = 8,
    RolloutDiverged = 9,
    Training = 10,
    Panic = 11,
}

/// Opaque ensemble snapshot.
pub struct KnodeEnsemble {
    model: Arc<EnsembleModel>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KnodeEpisodeSummary {
    /// Position MSE over the whole episode, mean of the per-axis values.
    pub mse: f64,
    pub mse_x: f64,
    pub mse_y: f64,
    pub mse_z: f64,
    /// Position MSE from the first mass change to the end.
    pub mse_post_change: f64,
    pub records: usize,
    /// Non-zero if the episode stopped early.
    pub failed: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> KnodeStatus {
    match e {
        Error::NonFinite { .. } | Error::DegenerateQuaternion { .. } => KnodeStatus::NonFinite,
        Error::Dimension { .. } => KnodeStatus::Dimension,
        Error::InvalidArgument(_) => KnodeStatus::InvalidArgument,
        Error::Config { .. } => KnodeStatus::Config,
        Error::EmptyEnsemble | Error::TrainingAborted(_) => KnodeStatus::Training,
        Error::RolloutDiverged { .. } => KnodeStatus::RolloutDiverged,
        Error::Format { .. } => KnodeStatus::Format,
        Error::Schema { .. } => KnodeStatus::Schema,
        Error::Io { .. } => KnodeStatus::Io,
    }
}

struct Fail(KnodeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KnodeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KnodeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            KnodeStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(KnodeStatus::NullPointer, format!("null pointer for `{what}`"))
}

unsafe fn handle<'a>(h: *const KnodeEnsemble) -> Result<&'a KnodeEnsemble, Fail> {
    h.as_ref().ok_or_else(|| null("ensemble"))
}

unsafe fn read_vec<const N: usize>(p: *const f64, what: &str) -> Result<nalgebra::SVector<f64, N>, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(nalgebra::SVector::from_column_slice(std::slice::from_raw_parts(p, N)))
}

unsafe fn write_vec(out: *mut f64, v: &StateVector) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    std::slice::from_raw_parts_mut(out, STATE_DIM).copy_from_slice(v.as_slice());
    Ok(())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(KnodeStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn knode_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates an empty ensemble (knowledge-only model) with default quadrotor
/// parameters, the default member architecture and the given capacity.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn knode_ensemble_new(capacity: usize, out: *mut *mut KnodeEnsemble) -> KnodeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = EnsembleModel::new(QuadParams::default(), capacity, &DEFAULT_LAYER_DIMS)?;
        *out = Box::into_raw(Box::new(KnodeEnsemble { model: Arc::new(model) }));
        Ok(())
    })
}

/// Loads an ensemble checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn knode_ensemble_load(path: *const c_char, out: *mut *mut KnodeEnsemble) -> KnodeStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(KnodeEnsemble { model: Arc::new(model) }));
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn knode_ensemble_save(h: *const KnodeEnsemble, path: *const c_char) -> KnodeStatus {
    guard(|| {
        let h = handle(h)?;
        let path = path_arg(path, "path")?;
        save_checkpoint(&h.model, &path)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn knode_ensemble_free(h: *mut KnodeEnsemble) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of members, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn knode_ensemble_len(h: *const KnodeEnsemble) -> usize {
    h.as_ref().map_or(0, |h| h.model.len())
}

/// Snapshot version, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn knode_ensemble_version(h: *const KnodeEnsemble) -> u64 {
    h.as_ref().map_or(0, |h| h.model.version())
}

/// Hybrid vector field: nominal dynamics plus the weighted member residuals.
///
/// # Safety
/// `x` points to 13 doubles, `u` to 4, `out` to 13 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn knode_ensemble_derivative(
    h: *const KnodeEnsemble,
    x: *const f64,
    u: *const f64,
    out: *mut f64,
) -> KnodeStatus {
    guard(|| {
        let h = handle(h)?;
        let x: StateVector = read_vec(x, "x")?;
        let u: ControlVector = read_vec(u, "u")?;
        let d = h.model.hybrid_derivative(&AugmentedState::new(&x, &u))?;
        write_vec(out, &d)
    })
}

/// Nominal (first-principles) vector field with the ensemble's parameters.
///
/// # Safety
/// Same as [`knode_ensemble_derivative`].
#[no_mangle]
pub unsafe extern "C" fn knode_nominal_derivative(
    h: *const KnodeEnsemble,
    x: *const f64,
    u: *const f64,
    out: *mut f64,
) -> KnodeStatus {
    guard(|| {
        let h = handle(h)?;
        let x: StateVector = read_vec(x, "x")?;
        let u: ControlVector = read_vec(u, "u")?;
        let d = nominal_derivative(&QuadState::from_vector(&x), &ControlInput::from_vector(&u), h.model.nominal())?;
        write_vec(out, &d)
    })
}

/// One RK4 step of the hybrid model over `dt` seconds, with the attitude
/// quaternion renormalized.
///
/// # Safety
/// Same as [`knode_ensemble_derivative`].
#[no_mangle]
pub unsafe extern "C" fn knode_ensemble_step(
    h: *const KnodeEnsemble,
    dt: f64,
    x: *const f64,
    u: *const f64,
    out: *mut f64,
) -> KnodeStatus {
    guard(|| {
        let h = handle(h)?;
        let x: StateVector = read_vec(x, "x")?;
        let u: ControlVector = read_vec(u, "u")?;
        let next = h.model.discretize(dt)?.step_flat(&x, &u)?;
        write_vec(out, &next)
    })
}

/// Runs one closed-loop episode on a circle of the given radius and speed.
///
/// `config_path` may be null for the default configuration. `method` is one
/// of `mpc-nominal`, `knode-offline`, `knode-online`, `geometric`.
///
/// # Safety
/// String arguments must be NUL-terminated (or null where allowed) and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn knode_episode_run(
    config_path: *const c_char,
    method: *const c_char,
    radius_m: f64,
    speed_m_per_s: f64,
    seed: u64,
    out: *mut KnodeEpisodeSummary,
) -> KnodeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_path.is_null() {
            ExperimentConfig::default()
        } else {
            ExperimentConfig::load(&path_arg(config_path, "config_path")?)?
        };
        cfg.validate()?;
        let name = path_arg(method, "method")?;
        let name = name.to_string_lossy();
        let method = Method::parse(&name)
            .ok_or_else(|| Fail(KnodeStatus::InvalidArgument, format!("unknown method `{name}`")))?;
        let scenario = Scenario::from_config(&cfg, radius_m, speed_m_per_s);
        scenario.reference.validate()?;
        let log = run_episode(method, &scenario, &cfg, seed)?;
        let mut s = KnodeEpisodeSummary {
            records: log.records.len(),
            failed: log.failed as u8,
            mse: f64::NAN,
            mse_x: f64::NAN,
            mse_y: f64::NAN,
            mse_z: f64::NAN,
            mse_post_change: f64::NAN,
        };
        if !log.failed {
            let end = scenario.t_final_s;
            let full = mse(&log, 0.0, end)?;
            s.mse = full.overall;
            s.mse_x = full.x;
            s.mse_y = full.y;
            s.mse_z = full.z;
            s.mse_post_change = mse(&log, post_change_start(&scenario), end)?.overall;
        }
        *out = s;
        Ok(())
    })
}
