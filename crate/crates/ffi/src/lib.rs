//! C ABI over the `wjmmd` core.
//!
//! Every fallible function returns a [`WjmmdStatus`]; on failure the message
//! is kept per thread and read back with [`wjmmd_last_error`]. Datasets and
//! models cross the boundary as opaque handles that the caller releases with
//! the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use wjmmd::alignment::{mmd2, pair_weights, KernelSpec};
use wjmmd::data::{fft_magnitude, load_domain, DomainDataset, SPECTRUM_LEN, WINDOW_LEN};
use wjmmd::diffcore::{Tape, Tensor};
use wjmmd::model::Model;
use wjmmd::Error;

/// Result of a call. Values 1 to 12 mirror the core error kinds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WjmmdStatus {
    Ok = 0,
    Dimension = 1,
    Contract = 2,
    MissingFile = 3,
    LengthMismatch = 4,
    LabelOutOfRange = 5,
    Manifest = 6,
    Config = 7,
    NonFiniteLoss = 8,
    Checkpoint = 9,
    Io = 10,
    Json = 11,
    Csv = 12,
    /// A required pointer argument was null.
    NullPointer = 100,
    /// A path was not valid UTF-8.
    InvalidString = 101,
    /// An output buffer was too small.
    BufferTooSmall = 102,
    /// The dataset carries no labels.
    NoLabels = 103,
    /// Internal panic caught at the boundary.
    Panic = 199,
}

impl From<&Error> for WjmmdStatus {
    fn from(e: &Error) -> Self {
        use WjmmdStatus::*;
        match e.code() {
            1 => Dimension,
            2 => Contract,
            3 => MissingFile,
            4 => LengthMismatch,
            5 => LabelOutOfRange,
            6 => Manifest,
            7 => Config,
            8 => NonFiniteLoss,
            9 => Checkpoint,
            10 => Io,
            11 => Json,
            _ => Csv,
        }
    }
}

/// Labeled or unlabeled spectra of one domain.
pub struct WjmmdDataset(DomainDataset);

/// A trained network loaded from a checkpoint.
pub struct WjmmdModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(WjmmdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(WjmmdStatus::from(&e), e.to_string())
    }
}

fn fail(status: WjmmdStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WjmmdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            WjmmdStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WjmmdStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(WjmmdStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    non_null(p, "path")?;
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(WjmmdStatus::InvalidString, "path is not valid UTF-8"))
}

unsafe fn input<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, capacity: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if capacity < len {
        return Err(fail(
            WjmmdStatus::BufferTooSmall,
            format!("{name} holds {capacity}, needs {len}"),
        ));
    }
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn wjmmd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Samples per input window.
#[no_mangle]
pub extern "C" fn wjmmd_window_len() -> usize {
    WINDOW_LEN
}

/// Magnitude bins per spectrum, the model input width.
#[no_mangle]
pub extern "C" fn wjmmd_spectrum_len() -> usize {
    SPECTRUM_LEN
}

/// Loads every window listed in a domain manifest.
///
/// # Safety
/// `manifest` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_dataset_load(
    manifest: *const c_char,
    out: *mut *mut WjmmdDataset,
) -> WjmmdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let ds = load_domain(&path_arg(manifest)?)?;
        *out = Box::into_raw(Box::new(WjmmdDataset(ds)));
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must come from [`wjmmd_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_dataset_free(ds: *mut WjmmdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of spectra in the dataset.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_dataset_len(ds: *const WjmmdDataset, out: *mut usize) -> WjmmdStatus {
    guard(|| {
        non_null(ds, "dataset")?;
        non_null(out, "out")?;
        *out = (*ds).0.len();
        Ok(())
    })
}

/// Number of classes declared by the manifest.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_dataset_class_count(
    ds: *const WjmmdDataset,
    out: *mut usize,
) -> WjmmdStatus {
    guard(|| {
        non_null(ds, "dataset")?;
        non_null(out, "out")?;
        *out = (*ds).0.class_count;
        Ok(())
    })
}

/// Copies the spectra, row-major `[len, spectrum_len]`, into `out`.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` valid for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_dataset_features(
    ds: *const WjmmdDataset,
    out: *mut f64,
    capacity: usize,
) -> WjmmdStatus {
    guard(|| {
        non_null(ds, "dataset")?;
        let v = (*ds).0.features.values();
        output(out, v.len(), capacity, "out")?.copy_from_slice(v);
        Ok(())
    })
}

/// Copies the labels into `out`.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` valid for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_dataset_labels(
    ds: *const WjmmdDataset,
    out: *mut usize,
    capacity: usize,
) -> WjmmdStatus {
    guard(|| {
        non_null(ds, "dataset")?;
        let labels = (*ds)
            .0
            .labels
            .as_ref()
            .ok_or_else(|| fail(WjmmdStatus::NoLabels, "dataset has no labels"))?;
        output(out, labels.len(), capacity, "out")?.copy_from_slice(labels);
        Ok(())
    })
}

/// Loads a checkpoint written by `wjmmd train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_model_load(path: *const c_char, out: *mut *mut WjmmdModel) -> WjmmdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let m = wjmmd::checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(WjmmdModel(m)));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`wjmmd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_model_free(model: *mut WjmmdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the model predicts.
///
/// # Safety
/// `model` must be a live model handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_model_class_count(
    model: *const WjmmdModel,
    out: *mut usize,
) -> WjmmdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).0.config().num_classes;
        Ok(())
    })
}

/// Predicts a class for each of `rows` spectra laid out row-major
/// `[rows, spectrum_len]`.
///
/// # Safety
/// `model` must be a live model handle, `spectra` valid for
/// `rows * spectrum_len` reads and `out` for `rows` writes.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_model_predict(
    model: *const WjmmdModel,
    spectra: *const f64,
    rows: usize,
    out: *mut usize,
) -> WjmmdStatus {
    guard(|| {
        non_null(model, "model")?;
        let x = input(spectra, rows * SPECTRUM_LEN, "spectra")?;
        let out = output(out, rows, rows, "out")?;
        if rows == 0 {
            return Ok(());
        }
        let x = Tensor::new(vec![rows, 1, SPECTRUM_LEN], x.to_vec())?;
        out.copy_from_slice(&(*model).0.predict(&x, 64)?);
        Ok(())
    })
}

/// Biased squared MMD between `m` source rows and `n` target rows of width
/// `dim`. A positive `sigma2` selects one Gaussian kernel of that bandwidth;
/// zero or less selects the five-kernel ladder around the median heuristic.
///
/// # Safety
/// `xs` and `xt` must be valid for `m * dim` and `n * dim` reads and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_mmd2(
    xs: *const f64,
    m: usize,
    xt: *const f64,
    n: usize,
    dim: usize,
    sigma2: f64,
    out: *mut f64,
) -> WjmmdStatus {
    guard(|| {
        non_null(out, "out")?;
        let a = Tensor::new(vec![m, dim], input(xs, m * dim, "xs")?.to_vec())?;
        let b = Tensor::new(vec![n, dim], input(xt, n * dim, "xt")?.to_vec())?;
        let k = if sigma2 > 0.0 {
            KernelSpec::single(sigma2)
        } else {
            KernelSpec::default()
        };
        let mut t = Tape::new();
        let (a, b) = (t.constant(a), t.constant(b));
        let d = mmd2(&mut t, a, b, &k)?;
        *out = t.value(d).item();
        Ok(())
    })
}

/// Softmax weights of a row-major `rows x cols` grid of pair discrepancies.
///
/// # Safety
/// `grid` must be valid for `rows * cols` reads and `out` for as many writes.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_pair_weights(
    grid: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> WjmmdStatus {
    guard(|| {
        let g = input(grid, rows * cols, "grid")?;
        let cells: Vec<Vec<f64>> = g.chunks(cols.max(1)).map(<[f64]>::to_vec).collect();
        let w = pair_weights(&cells)?.concat();
        output(out, w.len(), rows * cols, "out")?.copy_from_slice(&w);
        Ok(())
    })
}

/// Magnitudes of the first `spectrum_len` DFT bins of one window of
/// `window_len` samples.
///
/// # Safety
/// `window` must be valid for `len` reads and `out` for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn wjmmd_fft_magnitude(
    window: *const f64,
    len: usize,
    out: *mut f64,
    capacity: usize,
) -> WjmmdStatus {
    guard(|| {
        let m = fft_magnitude(input(window, len, "window")?)?;
        output(out, m.len(), capacity, "out")?.copy_from_slice(&m);
        Ok(())
    })
}
