//! C ABI over the alc core library.
//!
//! Handles are opaque and owned by the caller: everything returned as a
//! pointer must be released with the matching `*_free`. Functions that can
//! fail return [`AlcStatus`]; on any failure a message is stored in
//! thread-local state and readable through [`alc_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use alc_core::autodiff::Tensor;
use alc_core::cache::{read_cache, write_cache, CacheError};
use alc_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use alc_core::models::{Model, ModelError, ModelKind, ModelSpec};
use alc_core::pamap2::met_to_level;
use alc_core::preprocess::{
    apply_normalizer, fit_normalizer, ChannelStats, PreprocessError, SensorConfig, WindowSet,
};
use alc_core::stats::{wilcoxon_signed_rank, StatsError};
use alc_core::synth::{generate, SynthSpec};
use alc_core::train::{evaluate, train, Hyperparams, TrainError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Compute = 4,
}

/// A windowed dataset.
pub struct AlcWindowSet {
    inner: WindowSet,
}

/// A trained classifier together with its sensor configuration and the
/// normalization fitted on its training split.
pub struct AlcModel {
    model: Model,
    config: SensorConfig,
    stats: ChannelStats,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let clean = message.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = Some(CString::new(clean).expect("NUL stripped"));
    });
}

fn guarded<T>(fallback: T, body: impl FnOnce() -> T) -> T {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(value) => value,
        Err(_) => {
            set_error("internal panic");
            fallback
        }
    }
}

unsafe fn required_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, AlcStatus> {
    if ptr.is_null() {
        set_error(format!("{what} is null"));
        return Err(AlcStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        AlcStatus::InvalidArgument
    })
}

fn parse_config(tag: &str) -> Result<SensorConfig, AlcStatus> {
    tag.parse().map_err(|e: PreprocessError| {
        set_error(e.to_string());
        AlcStatus::InvalidArgument
    })
}

fn parse_model(tag: &str) -> Result<ModelKind, AlcStatus> {
    tag.parse().map_err(|e: ModelError| {
        set_error(e.to_string());
        AlcStatus::InvalidArgument
    })
}

fn cache_status(e: CacheError) -> AlcStatus {
    let status = match &e {
        CacheError::Io(_) => AlcStatus::Io,
        CacheError::Format(_) => AlcStatus::InvalidArgument,
    };
    set_error(e.to_string());
    status
}

fn checkpoint_status(e: CheckpointError) -> AlcStatus {
    let status = match &e {
        CheckpointError::Io(_) => AlcStatus::Io,
        CheckpointError::Engine(_) => AlcStatus::Compute,
        _ => AlcStatus::InvalidArgument,
    };
    set_error(e.to_string());
    status
}

fn train_status(e: TrainError) -> AlcStatus {
    let status = match &e {
        TrainError::Engine(_) => AlcStatus::Compute,
        _ => AlcStatus::InvalidArgument,
    };
    set_error(e.to_string());
    status
}

fn invalid<E: std::fmt::Display>(e: E) -> AlcStatus {
    set_error(e.to_string());
    AlcStatus::InvalidArgument
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn alc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread, or null if
/// none occurred. The pointer stays valid until the next failing call on
/// the same thread.
#[no_mangle]
pub extern "C" fn alc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |msg| msg.as_ptr())
    })
}

/// Generates a synthetic labeled dataset. Returns null on error.
#[no_mangle]
pub extern "C" fn alc_windows_synth(
    n_subjects: usize,
    windows_per_class: usize,
    channels: usize,
    window_length: usize,
    noise_std: f64,
    seed: u64,
) -> *mut AlcWindowSet {
    guarded(ptr::null_mut(), || {
        let spec = SynthSpec {
            n_subjects,
            windows_per_class,
            channels,
            window_length,
            noise_std,
            seed,
        };
        match generate(&spec) {
            Ok(inner) => Box::into_raw(Box::new(AlcWindowSet { inner })),
            Err(e) => {
                set_error(e.to_string());
                ptr::null_mut()
            }
        }
    })
}

/// Loads a window cache file. Returns null on error.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn alc_windows_read_cache(path: *const c_char) -> *mut AlcWindowSet {
    guarded(ptr::null_mut(), || {
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(_) => return ptr::null_mut(),
        };
        match read_cache(Path::new(path)) {
            Ok(inner) => Box::into_raw(Box::new(AlcWindowSet { inner })),
            Err(e) => {
                cache_status(e);
                ptr::null_mut()
            }
        }
    })
}

/// Writes a window cache file.
///
/// # Safety
/// `set` must come from this library; `path` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn alc_windows_write_cache(
    set: *const AlcWindowSet,
    path: *const c_char,
) -> AlcStatus {
    guarded(AlcStatus::Compute, || {
        let Some(set) = set.as_ref() else {
            set_error("set is null");
            return AlcStatus::NullPointer;
        };
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match write_cache(Path::new(path), &set.inner) {
            Ok(()) => AlcStatus::Ok,
            Err(e) => cache_status(e),
        }
    })
}

/// Restricts a full-placement set to a sensor configuration tag (WO, W6,
/// WC, WA, or W18). Returns a new set; the input is untouched.
///
/// # Safety
/// `set` must come from this library; `config` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn alc_windows_select(
    set: *const AlcWindowSet,
    config: *const c_char,
) -> *mut AlcWindowSet {
    guarded(ptr::null_mut(), || {
        let Some(set) = set.as_ref() else {
            set_error("set is null");
            return ptr::null_mut();
        };
        let tag = match required_str(config, "config") {
            Ok(t) => t,
            Err(_) => return ptr::null_mut(),
        };
        let config = match parse_config(tag) {
            Ok(c) => c,
            Err(_) => return ptr::null_mut(),
        };
        match set.inner.select_config(config) {
            Ok(inner) => Box::into_raw(Box::new(AlcWindowSet { inner })),
            Err(e) => {
                invalid(e);
                ptr::null_mut()
            }
        }
    })
}

/// Number of windows in the set; 0 if `set` is null.
///
/// # Safety
/// `set` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn alc_windows_len(set: *const AlcWindowSet) -> usize {
    set.as_ref().map_or(0, |s| s.inner.len())
}

/// Channel count of the set; 0 if `set` is null.
///
/// # Safety
/// `set` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn alc_windows_channels(set: *const AlcWindowSet) -> usize {
    set.as_ref().map_or(0, |s| s.inner.channels())
}

/// Samples per window; 0 if `set` is null.
///
/// # Safety
/// `set` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn alc_windows_window_len(set: *const AlcWindowSet) -> usize {
    set.as_ref().map_or(0, |s| s.inner.window_len())
}

/// Releases a window set. Null is a no-op.
///
/// # Safety
/// `set` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn alc_windows_free(set: *mut AlcWindowSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Trains a classifier on the given windows: selects the configuration's
/// channels, fits per-channel normalization, and runs SGD with momentum.
/// Returns null on error.
///
/// # Safety
/// `set` must come from this library; the tags must be valid strings.
#[no_mangle]
pub unsafe extern "C" fn alc_train(
    set: *const AlcWindowSet,
    model: *const c_char,
    config: *const c_char,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    momentum: f64,
    seed: u64,
) -> *mut AlcModel {
    guarded(ptr::null_mut(), || {
        let Some(set) = set.as_ref() else {
            set_error("set is null");
            return ptr::null_mut();
        };
        let kind = match required_str(model, "model").and_then(parse_model) {
            Ok(k) => k,
            Err(_) => return ptr::null_mut(),
        };
        let config = match required_str(config, "config").and_then(parse_config) {
            Ok(c) => c,
            Err(_) => return ptr::null_mut(),
        };
        let hp = Hyperparams {
            learning_rate,
            epochs,
            batch_size,
            momentum,
            seed,
        };
        let built = (|| -> Result<AlcModel, AlcStatus> {
            let mut selected = set.inner.select_config(config).map_err(invalid)?;
            let stats = fit_normalizer(&selected).map_err(invalid)?;
            apply_normalizer(&stats, &mut selected).map_err(invalid)?;
            let spec = ModelSpec {
                kind,
                in_channels: selected.channels(),
                window_length: selected.window_len(),
                n_classes: 3,
            };
            let mut model = Model::build(spec, hp.seed).map_err(invalid)?;
            train(&mut model, &selected, &hp).map_err(train_status)?;
            Ok(AlcModel {
                model,
                config,
                stats,
            })
        })();
        match built {
            Ok(handle) => Box::into_raw(Box::new(handle)),
            Err(_) => ptr::null_mut(),
        }
    })
}

/// Loads a model checkpoint. Returns null on error.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn alc_model_read(path: *const c_char) -> *mut AlcModel {
    guarded(ptr::null_mut(), || {
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(_) => return ptr::null_mut(),
        };
        match load_checkpoint(Path::new(path)) {
            Ok((model, config, stats)) => Box::into_raw(Box::new(AlcModel {
                model,
                config,
                stats,
            })),
            Err(e) => {
                checkpoint_status(e);
                ptr::null_mut()
            }
        }
    })
}

/// Saves a model checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn alc_model_write(model: *const AlcModel, path: *const c_char) -> AlcStatus {
    guarded(AlcStatus::Compute, || {
        let Some(handle) = model.as_ref() else {
            set_error("model is null");
            return AlcStatus::NullPointer;
        };
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match save_checkpoint(Path::new(path), &handle.model, handle.config, &handle.stats) {
            Ok(()) => AlcStatus::Ok,
            Err(e) => checkpoint_status(e),
        }
    })
}

/// Evaluates the model on a window set, normalizing with the statistics the
/// model was trained with. Accepts either a full-placement set or one
/// already restricted to the model's configuration.
///
/// # Safety
/// `model` and `set` must come from this library; the out pointers must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn alc_model_evaluate(
    model: *mut AlcModel,
    set: *const AlcWindowSet,
    out_accuracy: *mut f64,
    out_macro_f1: *mut f64,
) -> AlcStatus {
    guarded(AlcStatus::Compute, || {
        let Some(handle) = model.as_mut() else {
            set_error("model is null");
            return AlcStatus::NullPointer;
        };
        let Some(set) = set.as_ref() else {
            set_error("set is null");
            return AlcStatus::NullPointer;
        };
        if out_accuracy.is_null() || out_macro_f1.is_null() {
            set_error("output pointer is null");
            return AlcStatus::NullPointer;
        }
        let result = (|| -> Result<alc_core::train::EvalResult, AlcStatus> {
            let mut selected = set.inner.select_config(handle.config).map_err(invalid)?;
            apply_normalizer(&handle.stats, &mut selected).map_err(invalid)?;
            evaluate(&mut handle.model, &selected).map_err(train_status)
        })();
        match result {
            Ok(eval) => {
                *out_accuracy = eval.accuracy;
                *out_macro_f1 = eval.macro_f1;
                AlcStatus::Ok
            }
            Err(status) => status,
        }
    })
}

/// Classifies one raw window. `window` holds channel-major samples, channel
/// count and window length matching the model, so `len` must equal
/// channels * window_length. Writes the class index (0 low, 1 medium,
/// 2 high).
///
/// # Safety
/// `model` must come from this library; `window` must point to `len`
/// doubles; `out_level` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn alc_model_predict(
    model: *mut AlcModel,
    window: *const f64,
    len: usize,
    out_level: *mut u32,
) -> AlcStatus {
    guarded(AlcStatus::Compute, || {
        let Some(handle) = model.as_mut() else {
            set_error("model is null");
            return AlcStatus::NullPointer;
        };
        if window.is_null() || out_level.is_null() {
            set_error("window or output pointer is null");
            return AlcStatus::NullPointer;
        }
        let spec = handle.model.spec();
        let (channels, t_len) = (spec.in_channels, spec.window_length);
        if len != channels * t_len {
            set_error(format!(
                "window length {len} does not match {channels} channels x {t_len} samples"
            ));
            return AlcStatus::InvalidArgument;
        }
        let raw = std::slice::from_raw_parts(window, len);
        let mut data = Vec::with_capacity(len);
        for c in 0..channels {
            let (mean, std) = (handle.stats.mean[c], handle.stats.std[c]);
            for t in 0..t_len {
                data.push((raw[c * t_len + t] - mean) / std);
            }
        }
        let batch = match Tensor::new(&[1, channels, t_len], data) {
            Ok(t) => t,
            Err(e) => {
                set_error(e.to_string());
                return AlcStatus::InvalidArgument;
            }
        };
        match handle.model.forward(&batch, false) {
            Ok((tape, logits)) => {
                let row = tape.value(logits).data();
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                *out_level = best as u32;
                AlcStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                AlcStatus::Compute
            }
        }
    })
}

/// Releases a model. Null is a no-op.
///
/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn alc_model_free(model: *mut AlcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Maps a MET value to its intensity class index (0 low, 1 medium, 2 high).
///
/// # Safety
/// `out_level` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn alc_met_to_level(met: f64, out_level: *mut u32) -> AlcStatus {
    guarded(AlcStatus::Compute, || {
        if out_level.is_null() {
            set_error("output pointer is null");
            return AlcStatus::NullPointer;
        }
        match met_to_level(met) {
            Ok(level) => {
                *out_level = level.index() as u32;
                AlcStatus::Ok
            }
            Err(e) => invalid(e),
        }
    })
}

/// Two-sided Wilcoxon signed-rank test on paired differences. Writes the
/// test statistic W and the p-value.
///
/// # Safety
/// `diffs` must point to `len` doubles; the out pointers must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn alc_wilcoxon(
    diffs: *const f64,
    len: usize,
    out_w: *mut f64,
    out_p: *mut f64,
) -> AlcStatus {
    guarded(AlcStatus::Compute, || {
        if diffs.is_null() || out_w.is_null() || out_p.is_null() {
            set_error("pointer argument is null");
            return AlcStatus::NullPointer;
        }
        let slice = std::slice::from_raw_parts(diffs, len);
        match wilcoxon_signed_rank(slice) {
            Ok(result) => {
                *out_w = result.w;
                *out_p = result.p_value;
                AlcStatus::Ok
            }
            Err(e @ StatsError::Degenerate) => invalid(e),
            Err(e) => invalid(e),
        }
    })
}
