//! C interface: opaque dataset and model handles, status codes, and a
//! per-thread message for the last failure.
//!
//! Every function returns an [`Adapt2Status`]. Handles returned through out
//! pointers are owned by the caller and released with the matching `_free`.
//! Windows are passed as row-major `[n, channels, timesteps]` float buffers
//! of raw values; a model that carries normalization statistics applies them
//! itself.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use adapt2::adapt::{self, FinetuneConfig, Protocol};
use adapt2::data::{self, Dataset, DomainId, Window};
use adapt2::models::{self, ModelBundle};
use adapt2::pretext::{config_for_params, Pretext, PretextConfig, PretextKind};
use adapt2::tensor::Tensor;
use adapt2::{metrics, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adapt2Status {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Numeric = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adapt2Protocol {
    LinearEval = 0,
    EndToEnd = 1,
}

/// Opaque labeled or unlabeled window collection.
pub struct Adapt2Dataset(Dataset);

/// Opaque encoder, heads and normalization statistics.
pub struct Adapt2Model(ModelBundle);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(Adapt2Status, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => Adapt2Status::Io,
            Error::Json(_) | Error::Csv(_) | Error::Data(_) => Adapt2Status::Format,
            Error::Config(_) | Error::BatchTooSmall { .. } => Adapt2Status::Config,
            Error::Tensor(_) => Adapt2Status::Numeric,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(Adapt2Status::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(Adapt2Status::NullArgument, format!("`{what}` is null"))
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Adapt2Status {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Adapt2Status::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            Adapt2Status::Internal
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Splits a flat buffer into windows of the model's input shape and applies
/// the model's normalization.
fn windows_for(model: &ModelBundle, values: &[f32], n: usize, timesteps: usize) -> Result<Vec<Tensor>, Failure> {
    let channels = model.encoder.in_channels;
    if n == 0 || timesteps == 0 {
        return Err(invalid("need at least one window with at least one timestep"));
    }
    if values.len() != n * channels * timesteps {
        return Err(invalid(format!("buffer holds {} values, expected {n} x {channels} x {timesteps}", values.len())));
    }
    values
        .chunks(channels * timesteps)
        .map(|chunk| {
            let t = Tensor::new(vec![channels, timesteps], chunk.to_vec()).map_err(Error::from)?;
            Ok(match &model.norm {
                Some(n) => n.apply(&t)?,
                None => t,
            })
        })
        .collect()
}

fn normalized(model: &ModelBundle, ds: &Dataset) -> Result<Vec<Window>, Failure> {
    if ds.channels != model.encoder.in_channels {
        return Err(invalid(format!("dataset has {} channels, model expects {}", ds.channels, model.encoder.in_channels)));
    }
    Ok(match &model.norm {
        Some(n) => ds.normalized_with(n)?.windows,
        None => ds.windows.clone(),
    })
}

/// Message describing the most recent failure on this thread, or null if the
/// last call succeeded. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn adapt2_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Reads a dataset file (`.csv` by extension, binary otherwise).
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adapt2_dataset_load(path: *const c_char, out: *mut *mut Adapt2Dataset) -> Adapt2Status {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path)?;
        let ds = if path.extension().is_some_and(|e| e == "csv") { data::read_csv(&path)? } else { data::read_dataset(&path)? };
        *out = boxed(Adapt2Dataset(ds));
        Ok(())
    })
}

/// Builds a dataset from `n` windows. `labels` may be null for unlabeled
/// data; otherwise a negative label marks an unlabeled window. Domain ids
/// must be dense from zero.
///
/// # Safety
/// `values` must hold `n * channels * timesteps` floats, `domains` and (if
/// non-null) `labels` must hold `n` entries, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adapt2_dataset_from_buffers(
    values: *const f32,
    labels: *const i64,
    domains: *const usize,
    n: usize,
    channels: usize,
    timesteps: usize,
    n_classes: usize,
    out: *mut *mut Adapt2Dataset,
) -> Adapt2Status {
    guard(|| {
        let out = out_arg(out, "out")?;
        let values = slice(values, n * channels * timesteps, "values")?;
        let domains = slice(domains, n, "domains")?;
        let labels = if labels.is_null() { None } else { Some(slice(labels, n, "labels")?) };
        if n == 0 || channels == 0 || timesteps == 0 {
            return Err(invalid("dataset dimensions must be positive"));
        }
        let mut windows = Vec::with_capacity(n);
        for (i, chunk) in values.chunks(channels * timesteps).enumerate() {
            let label = match labels.map(|l| l[i]) {
                Some(l) if l >= 0 => Some(usize::try_from(l).map_err(|_| invalid("label out of range"))?),
                _ => None,
            };
            windows.push(Window::new(Tensor::new(vec![channels, timesteps], chunk.to_vec()).map_err(Error::from)?, label, domains[i]));
        }
        let n_domains = domains.iter().max().map_or(0, |d| d + 1);
        let ids = (0..n_domains).map(|id| DomainId { id, tag: format!("d{id}") }).collect();
        *out = boxed(Adapt2Dataset(Dataset::new(windows, channels, timesteps, ids, n_classes)?));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn adapt2_dataset_free(dataset: *mut Adapt2Dataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn adapt2_dataset_save(dataset: *const Adapt2Dataset, path: *const c_char) -> Adapt2Status {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        data::write_dataset(&ds.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Window count, channels, timesteps, classes and domains.
///
/// # Safety
/// `dataset` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn adapt2_dataset_shape(
    dataset: *const Adapt2Dataset,
    len: *mut usize,
    channels: *mut usize,
    timesteps: *mut usize,
    n_classes: *mut usize,
    n_domains: *mut usize,
) -> Adapt2Status {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.0;
        *out_arg(len, "len")? = ds.len();
        *out_arg(channels, "channels")? = ds.channels;
        *out_arg(timesteps, "timesteps")? = ds.timesteps;
        *out_arg(n_classes, "n_classes")? = ds.n_classes;
        *out_arg(n_domains, "n_domains")? = ds.n_domains();
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adapt2_model_load(path: *const c_char, out: *mut *mut Adapt2Model) -> Adapt2Status {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = boxed(Adapt2Model(ModelBundle::load(path_arg(path)?)?));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn adapt2_model_save(model: *const Adapt2Model, path: *const c_char) -> Adapt2Status {
    guard(|| {
        handle(model, "model")?.0.save(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn adapt2_model_free(model: *mut Adapt2Model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input channels, embedding width and classifier size (0 without one).
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn adapt2_model_info(
    model: *const Adapt2Model,
    in_channels: *mut usize,
    embedding_dim: *mut usize,
    n_classes: *mut usize,
) -> Adapt2Status {
    guard(|| {
        let m = &handle(model, "model")?.0;
        *out_arg(in_channels, "in_channels")? = m.encoder.in_channels;
        *out_arg(embedding_dim, "embedding_dim")? = m.encoder.embedding_dim();
        *out_arg(n_classes, "n_classes")? = m.n_classes().unwrap_or(0);
        Ok(())
    })
}

/// Writes `n * embedding_dim` floats to `out`.
///
/// # Safety
/// `values` must hold `n * in_channels * timesteps` floats and `out` must
/// have room for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn adapt2_model_embed(
    model: *const Adapt2Model,
    values: *const f32,
    n: usize,
    timesteps: usize,
    out: *mut f32,
    out_len: usize,
) -> Adapt2Status {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let windows = windows_for(m, slice(values, n * m.encoder.in_channels * timesteps, "values")?, n, timesteps)?;
        let need = n * m.encoder.embedding_dim();
        if out_len < need {
            return Err(invalid(format!("output holds {out_len} floats, need {need}")));
        }
        let emb = models::embed(&m.params, &m.encoder, &windows)?;
        slice_mut(out, need, "out")?.copy_from_slice(emb.data());
        Ok(())
    })
}

/// Writes one predicted class per window to `out`.
///
/// # Safety
/// `values` must hold `n * in_channels * timesteps` floats and `out` must
/// have room for `n` entries.
#[no_mangle]
pub unsafe extern "C" fn adapt2_model_predict(model: *const Adapt2Model, values: *const f32, n: usize, timesteps: usize, out: *mut usize) -> Adapt2Status {
    guard(|| {
        let m = &handle(model, "model")?.0;
        if m.n_classes().is_none() {
            return Err(invalid("model has no classifier; fine-tune it first"));
        }
        let windows = windows_for(m, slice(values, n * m.encoder.in_channels * timesteps, "values")?, n, timesteps)?;
        let predicted = metrics::predict(m, &windows)?;
        slice_mut(out, n, "out")?.copy_from_slice(&predicted);
        Ok(())
    })
}

/// Pretext replay on every window of `shots` (labels are ignored). The
/// objective is the one whose head the model carries. Returns a new model.
///
/// # Safety
/// `model` and `shots` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adapt2_model_replay(
    model: *const Adapt2Model,
    shots: *const Adapt2Dataset,
    steps: usize,
    lr: f32,
    seed: u64,
    out: *mut *mut Adapt2Model,
) -> Adapt2Status {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let shots = normalized(m, &handle(shots, "shots")?.0)?;
        let out = out_arg(out, "out")?;
        let cfg = config_for_params(&m.params, &PretextConfig::new(PretextKind::SimClr))?;
        let pretext = Pretext::new(cfg, m.encoder.clone())?;
        let (params, _) = adapt::pretext_replay(&pretext, &m.params, &shots, steps, lr, seed)?;
        *out = boxed(Adapt2Model(ModelBundle { params, ..m.clone() }));
        Ok(())
    })
}

/// Trains a fresh classifier on the labeled windows of `shots`; every class
/// of the dataset needs at least one. A non-positive `lr` selects the
/// protocol's default rate. Returns a new model.
///
/// # Safety
/// `model` and `shots` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adapt2_model_finetune(
    model: *const Adapt2Model,
    shots: *const Adapt2Dataset,
    protocol: Adapt2Protocol,
    lr: f32,
    epochs: usize,
    out: *mut *mut Adapt2Model,
) -> Adapt2Status {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let ds = &handle(shots, "shots")?.0;
        let windows: Vec<Window> = normalized(m, ds)?.into_iter().filter(|w| w.label.is_some()).collect();
        let out = out_arg(out, "out")?;
        let protocol = match protocol {
            Adapt2Protocol::LinearEval => Protocol::LinearEval,
            Adapt2Protocol::EndToEnd => Protocol::EndToEnd,
        };
        let cfg = FinetuneConfig { protocol, lr: (lr > 0.0).then_some(lr), epochs };
        let (tuned, _) = adapt::finetune(m, &windows, ds.n_classes, &cfg)?;
        *out = boxed(Adapt2Model(tuned));
        Ok(())
    })
}
