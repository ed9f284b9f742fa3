//! C ABI for the simulator: opaque handles, integer status codes, and a
//! thread-local last-error message.
//!
//! Every function is null-safe: passing a null handle returns
//! [`IovflStatus::NullPointer`] (or a harmless default for accessors)
//! instead of crashing. Handles must be released with their matching
//! `_free` function exactly once; the `_free` functions accept null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::Path;
use std::ptr;

use iovfl::sim::{
    emit_metrics, run_experiment, ExperimentOutcome, MetricsFormat, SchedulerKind, SimConfig,
};

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg.into());
}

/// Outcome of an interface call; anything but `Ok` leaves a message
/// retrievable via [`iovfl_last_error_message`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IovflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NumericFailure = 4,
    IoFailure = 5,
    OutOfRange = 6,
}

fn status_of(err: &iovfl::Error) -> IovflStatus {
    match err {
        iovfl::Error::Io { .. } | iovfl::Error::Csv(_) => IovflStatus::IoFailure,
        iovfl::Error::Numeric(_) => IovflStatus::NumericFailure,
        _ => IovflStatus::InvalidArgument,
    }
}

/// Simulation configuration handle.
pub struct IovflConfig {
    cfg: SimConfig,
}

/// Finished experiment handle: per-round metrics plus final state.
pub struct IovflRun {
    outcome: ExperimentOutcome,
}

/// Copies the most recent error message for this thread into `buf`
/// (truncated, always NUL-terminated) and returns the full message length
/// in bytes. `buf` may be null when `len` is 0 to query the length.
///
/// # Safety
/// `buf` must point to at least `len` writable bytes, or be null with
/// `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn iovfl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Returns a config with the built-in defaults. Never fails.
#[no_mangle]
pub extern "C" fn iovfl_config_default() -> *mut IovflConfig {
    Box::into_raw(Box::new(IovflConfig { cfg: SimConfig::default() }))
}

unsafe fn cstr_path<'a>(ptr: *const c_char) -> Result<&'a Path, IovflStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(IovflStatus::NullPointer);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(IovflStatus::InvalidUtf8)
        }
    }
}

/// Loads a TOML config file into a new handle stored in `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn iovfl_config_load(
    path: *const c_char,
    out: *mut *mut IovflConfig,
) -> IovflStatus {
    if out.is_null() {
        set_error("null output pointer");
        return IovflStatus::NullPointer;
    }
    let path = match unsafe { cstr_path(path) } {
        Ok(p) => p,
        Err(status) => return status,
    };
    match SimConfig::load(path) {
        Ok(cfg) => {
            unsafe { *out = Box::into_raw(Box::new(IovflConfig { cfg })) };
            IovflStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Overrides the config seed.
///
/// # Safety
/// `cfg` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn iovfl_config_set_seed(cfg: *mut IovflConfig, seed: u64) -> IovflStatus {
    match unsafe { cfg.as_mut() } {
        Some(handle) => {
            handle.cfg.seed = seed;
            IovflStatus::Ok
        }
        None => {
            set_error("null config handle");
            IovflStatus::NullPointer
        }
    }
}

/// Releases a config handle. Null is accepted.
///
/// # Safety
/// `cfg` must be a handle returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn iovfl_config_free(cfg: *mut IovflConfig) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// Runs a full experiment with the named scheduler (`random`,
/// `round_robin`, `location_significance`, `location_info_significance`)
/// and stores the run handle in `out`.
///
/// # Safety
/// `cfg` must be a live config handle, `scheduler` a NUL-terminated
/// string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn iovfl_run_experiment(
    cfg: *const IovflConfig,
    scheduler: *const c_char,
    out: *mut *mut IovflRun,
) -> IovflStatus {
    if out.is_null() {
        set_error("null output pointer");
        return IovflStatus::NullPointer;
    }
    let Some(handle) = (unsafe { cfg.as_ref() }) else {
        set_error("null config handle");
        return IovflStatus::NullPointer;
    };
    if scheduler.is_null() {
        set_error("null scheduler name");
        return IovflStatus::NullPointer;
    }
    let kind = match unsafe { CStr::from_ptr(scheduler) }.to_str() {
        Ok(name) => match name.parse::<SchedulerKind>() {
            Ok(kind) => kind,
            Err(e) => {
                set_error(e.to_string());
                return IovflStatus::InvalidArgument;
            }
        },
        Err(_) => {
            set_error("scheduler name is not valid UTF-8");
            return IovflStatus::InvalidUtf8;
        }
    };
    match run_experiment(&handle.cfg, kind) {
        Ok(outcome) => {
            unsafe { *out = Box::into_raw(Box::new(IovflRun { outcome })) };
            IovflStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Number of completed rounds; 0 for a null handle.
///
/// # Safety
/// `run` must be a live run handle or null.
#[no_mangle]
pub unsafe extern "C" fn iovfl_run_num_rounds(run: *const IovflRun) -> usize {
    unsafe { run.as_ref() }.map_or(0, |r| r.outcome.metrics.len())
}

/// 1 when the loss stop rule fired before the round budget, else 0.
///
/// # Safety
/// `run` must be a live run handle or null.
#[no_mangle]
pub unsafe extern "C" fn iovfl_run_loss_converged(run: *const IovflRun) -> i32 {
    unsafe { run.as_ref() }.map_or(0, |r| r.outcome.loss_converged as i32)
}

macro_rules! round_scalar_accessor {
    ($(#[$doc:meta])* $name:ident, $field:ident) => {
        $(#[$doc])*
        ///
        /// # Safety
        /// `run` must be a live run handle and `out` a valid pointer.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            run: *const IovflRun,
            round: usize,
            out: *mut f64,
        ) -> IovflStatus {
            let Some(handle) = (unsafe { run.as_ref() }) else {
                set_error("null run handle");
                return IovflStatus::NullPointer;
            };
            if out.is_null() {
                set_error("null output pointer");
                return IovflStatus::NullPointer;
            }
            match handle.outcome.metrics.get(round) {
                Some(m) => {
                    unsafe { *out = m.$field };
                    IovflStatus::Ok
                }
                None => {
                    set_error(format!(
                        "round {round} out of range ({} completed)",
                        handle.outcome.metrics.len()
                    ));
                    IovflStatus::OutOfRange
                }
            }
        }
    };
}

round_scalar_accessor!(
    /// Global loss of the given round.
    iovfl_run_global_loss,
    global_loss
);
round_scalar_accessor!(
    /// Test accuracy of the given round.
    iovfl_run_accuracy,
    accuracy
);
round_scalar_accessor!(
    /// Freshness-discounted model value of the given round.
    iovfl_run_omega,
    omega
);
round_scalar_accessor!(
    /// Net provider profit at the true type for the given round.
    iovfl_run_net_vsp_profit,
    net_vsp_profit
);
round_scalar_accessor!(
    /// Net social welfare at the true type for the given round.
    iovfl_run_net_social_welfare,
    net_social_welfare
);

/// Writes the run's metrics to `path` in the given format (`csv` or
/// `jsonl`).
///
/// # Safety
/// `run` must be a live run handle; `path` and `format` NUL-terminated
/// strings.
#[no_mangle]
pub unsafe extern "C" fn iovfl_run_write_metrics(
    run: *const IovflRun,
    path: *const c_char,
    format: *const c_char,
) -> IovflStatus {
    let Some(handle) = (unsafe { run.as_ref() }) else {
        set_error("null run handle");
        return IovflStatus::NullPointer;
    };
    let path = match unsafe { cstr_path(path) } {
        Ok(p) => p,
        Err(status) => return status,
    };
    if format.is_null() {
        set_error("null format");
        return IovflStatus::NullPointer;
    }
    let format = match unsafe { CStr::from_ptr(format) }.to_str() {
        Ok(s) => match s.parse::<MetricsFormat>() {
            Ok(f) => f,
            Err(e) => {
                set_error(e.to_string());
                return IovflStatus::InvalidArgument;
            }
        },
        Err(_) => {
            set_error("format is not valid UTF-8");
            return IovflStatus::InvalidUtf8;
        }
    };
    match emit_metrics(&handle.outcome.metrics, path, format) {
        Ok(()) => IovflStatus::Ok,
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Releases a run handle. Null is accepted.
///
/// # Safety
/// `run` must be a handle returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn iovfl_run_free(run: *mut IovflRun) {
    if !run.is_null() {
        drop(unsafe { Box::from_raw(run) });
    }
}
