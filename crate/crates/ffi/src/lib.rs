//! C ABI for the kgamc signal classifier.
//!
//! Every fallible call returns a [`KgamcStatus`]. On failure a message is
//! kept per thread and can be read with [`kgamc_last_error`]. Panics are
//! caught at the boundary and reported as `KGAMC_STATUS_PANIC`.
//!
//! Frames are passed as packed `float` arrays, `2 * frame_len` values per
//! frame: the in-phase row followed by the quadrature row.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use kgamc::checkpoint::load_checkpoint;
use kgamc::cli::{exit_code, EXIT_VALIDATION};
use kgamc::mkg;
use kgamc::sigsyn::{self, ModulationClass, SynthConfig};
use kgamc::trainer::{infer_raw, InferMode, ModelState};
use kgamc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgamcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Malformed input data, file contents or configuration.
    Validation = 3,
    Io = 4,
    BufferTooSmall = 5,
    Runtime = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgamcMode {
    /// Argmax of the classifier head.
    Classifier = 0,
    /// Nearest class anchor by cosine similarity.
    Anchor = 1,
}

impl From<KgamcMode> for InferMode {
    fn from(m: KgamcMode) -> Self {
        match m {
            KgamcMode::Classifier => InferMode::Classifier,
            KgamcMode::Anchor => InferMode::Anchor,
        }
    }
}

/// Opaque handle to a loaded model.
pub struct KgamcModel {
    state: ModelState<f32>,
}

struct Failure {
    status: KgamcStatus,
    msg: String,
}

impl Failure {
    fn new(status: KgamcStatus, msg: impl Into<String>) -> Self {
        Self {
            status,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => KgamcStatus::Io,
            _ if exit_code(&e) == EXIT_VALIDATION => KgamcStatus::Validation,
            _ => KgamcStatus::Runtime,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KgamcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KgamcStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.msg);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            KgamcStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(KgamcStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(KgamcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn deref_model<'a>(m: *const KgamcModel) -> Result<&'a KgamcModel, Failure> {
    non_null(m, "model")?;
    Ok(&*m)
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kgamc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kgamc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` owns a model that must be
/// released with [`kgamc_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgamc_model_load(path: *const c_char, out: *mut *mut KgamcModel) -> KgamcStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = std::ptr::null_mut();
        let path = c_str(path, "path")?;
        let state = load_checkpoint::<f32>(path)?;
        *out = Box::into_raw(Box::new(KgamcModel { state }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`kgamc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kgamc_model_free(model: *mut KgamcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kgamc_model_num_classes(model: *const KgamcModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.class_names.len())
}

/// Samples per channel in one frame, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kgamc_model_frame_len(model: *const KgamcModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.frame_len())
}

/// Width of the signal feature vector, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kgamc_model_feature_dim(model: *const KgamcModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.msnet.config.d)
}

/// Copies the NUL-terminated name of class `index` into `buf`. `*needed`
/// (if not NULL) receives the buffer size required, terminator included.
///
/// # Safety
/// `buf` must hold `cap` bytes; `needed` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn kgamc_model_class_name(
    model: *const KgamcModel,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> KgamcStatus {
    guard(|| {
        let m = deref_model(model)?;
        let name = m.state.class_names.get(index).ok_or_else(|| {
            Failure::new(
                KgamcStatus::InvalidArgument,
                format!(
                    "class index {index} out of range for {} classes",
                    m.state.class_names.len()
                ),
            )
        })?;
        let len = name.len() + 1;
        if !needed.is_null() {
            *needed = len;
        }
        non_null(buf, "buf")?;
        if cap < len {
            return Err(Failure::new(
                KgamcStatus::BufferTooSmall,
                format!("need {len} bytes, have {cap}"),
            ));
        }
        std::ptr::copy_nonoverlapping(name.as_ptr(), buf.cast::<u8>(), name.len());
        *buf.add(name.len()) = 0;
        Ok(())
    })
}

unsafe fn frames<'a>(m: &KgamcModel, iq: *const f32, n_frames: usize) -> Result<Vec<&'a [f32]>, Failure> {
    non_null(iq, "iq")?;
    if n_frames == 0 {
        return Err(Failure::new(KgamcStatus::InvalidArgument, "n_frames is zero"));
    }
    let stride = 2 * m.state.frame_len();
    let all = std::slice::from_raw_parts(iq, n_frames * stride);
    Ok(all.chunks(stride).collect())
}

/// Classifies `n_frames` frames. Writes one label per frame to `labels` and,
/// if `scores` is not NULL, `n_frames * num_classes` row-major softmax scores.
///
/// # Safety
/// `iq` must hold `n_frames * 2 * frame_len` floats, `labels` `n_frames`
/// entries and `scores` (if given) `n_frames * num_classes` floats.
#[no_mangle]
pub unsafe extern "C" fn kgamc_classify(
    model: *const KgamcModel,
    iq: *const f32,
    n_frames: usize,
    mode: KgamcMode,
    labels: *mut u32,
    scores: *mut f32,
) -> KgamcStatus {
    guard(|| {
        let m = deref_model(model)?;
        non_null(labels, "labels")?;
        let input = frames(m, iq, n_frames)?;
        let inf = infer_raw(&input, m.state.frame_len(), &m.state, mode.into())?;
        let out = std::slice::from_raw_parts_mut(labels, n_frames);
        for (o, &l) in out.iter_mut().zip(&inf.labels) {
            *o = l as u32;
        }
        if !scores.is_null() {
            let s = inf.scores.data();
            std::slice::from_raw_parts_mut(scores, s.len()).copy_from_slice(s);
        }
        Ok(())
    })
}

/// Writes `n_frames * feature_dim` row-major signal features to `out`.
///
/// # Safety
/// `iq` must hold `n_frames * 2 * frame_len` floats and `out`
/// `n_frames * feature_dim` floats.
#[no_mangle]
pub unsafe extern "C" fn kgamc_features(
    model: *const KgamcModel,
    iq: *const f32,
    n_frames: usize,
    out: *mut f32,
) -> KgamcStatus {
    guard(|| {
        let m = deref_model(model)?;
        non_null(out, "out")?;
        let input = frames(m, iq, n_frames)?;
        let inf = infer_raw(&input, m.state.frame_len(), &m.state, InferMode::Classifier)?;
        let f = inf.features.data();
        std::slice::from_raw_parts_mut(out, f.len()).copy_from_slice(f);
        Ok(())
    })
}

/// Synthesizes one frame of `class_name` (e.g. "QPSK") at `snr_db` into `out`
/// (`2 * frame_len` floats). The same `(seed, index)` always yields the same
/// frame. An SNR of 32767 means noiseless.
///
/// # Safety
/// `class_name` must be NUL-terminated and `out` hold `2 * frame_len` floats.
#[no_mangle]
pub unsafe extern "C" fn kgamc_synth_frame(
    class_name: *const c_char,
    snr_db: i16,
    seed: u64,
    index: u64,
    frame_len: usize,
    out: *mut f32,
) -> KgamcStatus {
    guard(|| {
        let class: ModulationClass = c_str(class_name, "class_name")?.parse()?;
        non_null(out, "out")?;
        let cfg = SynthConfig {
            frame_len,
            seed,
            snr_grid: vec![snr_db],
            classes: vec![class],
            ..SynthConfig::default()
        };
        cfg.validate()?;
        let f = sigsyn::synth_frame(class, 0, snr_db, &cfg, &mut sigsyn::frame_rng(seed, index))?;
        std::slice::from_raw_parts_mut(out, f.iq.len()).copy_from_slice(&f.iq);
        Ok(())
    })
}

/// Checks a triple file (NULL for the built-in graph) against the relation
/// signatures. `*violations` receives the count; any violation returns
/// `KGAMC_STATUS_VALIDATION`.
///
/// # Safety
/// `path` must be NULL or NUL-terminated; `violations` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn kgamc_kg_validate(path: *const c_char, violations: *mut usize) -> KgamcStatus {
    guard(|| {
        let text = if path.is_null() {
            mkg::DEFAULT_MKG.to_string()
        } else {
            let p = c_str(path, "path")?;
            std::fs::read_to_string(p)
                .map_err(|e| Failure::new(KgamcStatus::Io, format!("{}: {e}", Path::new(p).display())))?
        };
        let set = mkg::parse_triples(&text)?;
        let found = mkg::validate_ontology(&set);
        if !violations.is_null() {
            *violations = found.len();
        }
        match found.first() {
            None => Ok(()),
            Some(v) => Err(Failure::new(
                KgamcStatus::Validation,
                format!("{} violations, first: {v}", found.len()),
            )),
        }
    })
}
