//! C ABI over `semcom-lab`.
//!
//! Models are exposed as opaque handles created by `*_fit` / `*_load` and
//! released with the matching `*_free`. Every fallible call returns an
//! [`SclStatus`]; on failure a human-readable message is kept per thread
//! and can be copied out with [`scl_last_error_message`]. Matrices are
//! dense row-major `double` buffers whose shapes are passed explicitly.
//! Panics never cross the boundary; they surface as `SCL_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ndarray::{ArrayView2, Array2};
use semcom_lab::cu::CuModel;
use semcom_lab::dre::{self, DreConfig, DreModel};
use semcom_lab::error::Error;
use semcom_lab::nnet::Checkpoint;
use semcom_lab::su::{self, SuModel};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Io = 5,
    Checkpoint = 6,
    Untrained = 7,
    Panic = 8,
    Internal = 9,
}

/// Fitted density-ratio estimator.
pub struct SclDre(DreModel);

/// Common-unit encoder loaded from a checkpoint.
pub struct SclCu(CuModel);

/// Specific-unit encoder/decoder loaded from a checkpoint.
pub struct SclSu(SuModel);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> SclStatus {
    match err {
        Error::Shape { .. } => SclStatus::Shape,
        Error::NonFinite(_) => SclStatus::NonFinite,
        Error::InvalidArgument(_) | Error::Config(_) => SclStatus::InvalidArgument,
        Error::Io(_) | Error::MissingFile(_) | Error::Idx(_) | Error::Csv(_) => SclStatus::Io,
        Error::Checkpoint(_) => SclStatus::Checkpoint,
        Error::Untrained => SclStatus::Untrained,
        _ => SclStatus::Internal,
    }
}

struct Fail(SclStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SclStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SclStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SclStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn matrix<'a>(ptr: *const f64, rows: usize, cols: usize, what: &str) -> Result<ArrayView2<'a, f64>, Fail> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Fail(SclStatus::InvalidArgument, format!("{what} size overflows")))?;
    let data = slice(ptr, len, what)?;
    ArrayView2::from_shape((rows, cols), data).map_err(|e| Fail(SclStatus::Shape, e.to_string()))
}

fn copy_out(src: &Array2<f64>, dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *s;
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail(SclStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| null(what))
}

/// Copies the calling thread's last error message into `buf` (always NUL
/// terminated when `len > 0`) and returns the full message length in bytes,
/// excluding the terminator. An empty message means the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn scl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fits a kernel logistic-regression ratio estimator of `p / q` from
/// `n_p` and `n_q` row-major samples of dimension `dim`. Pass 0 for
/// `max_iters` to use the default budget.
///
/// # Safety
/// `samples_p` / `samples_q` must hold `n_p * dim` / `n_q * dim` doubles;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scl_dre_fit(
    samples_p: *const f64,
    n_p: usize,
    samples_q: *const f64,
    n_q: usize,
    dim: usize,
    bandwidth: f64,
    gamma: f64,
    max_iters: usize,
    out: *mut *mut SclDre,
) -> SclStatus {
    guard(|| {
        let p = matrix(samples_p, n_p, dim, "samples_p")?;
        let q = matrix(samples_q, n_q, dim, "samples_q")?;
        let defaults = DreConfig::default();
        let cfg = DreConfig {
            bandwidth,
            gamma,
            max_iters: if max_iters == 0 { defaults.max_iters } else { max_iters },
            ..defaults
        };
        let (model, _) = dre::fit(p, q, &cfg)?;
        store(out, SclDre(model))
    })
}

/// Writes the estimated ratio `r(x)` for `n` rows of `x` into `out`.
///
/// # Safety
/// `model` must come from [`scl_dre_fit`]; `x` holds `n * dim` doubles and
/// `out` has room for `n`.
#[no_mangle]
pub unsafe extern "C" fn scl_dre_estimate(
    model: *const SclDre,
    x: *const f64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> SclStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let r = m.0.estimate(matrix(x, n, dim, "x")?)?;
        slice_mut(out, n, "out")?.copy_from_slice(r.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Input dimension of a fitted estimator, 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from [`scl_dre_fit`].
#[no_mangle]
pub unsafe extern "C" fn scl_dre_dim(model: *const SclDre) -> usize {
    model.as_ref().map_or(0, |m| m.0.dim())
}

/// # Safety
/// `model` must be null or come from [`scl_dre_fit`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn scl_dre_free(model: *mut SclDre) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// KL divergence of `N(mu, diag(sigma^2))` from the standard normal.
///
/// # Safety
/// `mu` and `sigma` hold `d` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn scl_kl_gaussian(mu: *const f64, sigma: *const f64, d: usize, out: *mut f64) -> SclStatus {
    guard(|| {
        let v = su::kl_gaussian(slice(mu, d, "mu")?, slice(sigma, d, "sigma")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Sigmoid approximation of the KL to a log-uniform prior. `clamped`
/// (optional) receives how many coordinates hit the `sigma^2 / mu^2` clamp.
///
/// # Safety
/// `mu` and `sigma` hold `d` doubles; `out` is writable; `clamped` is null
/// or writable.
#[no_mangle]
pub unsafe extern "C" fn scl_kl_loguniform(
    mu: *const f64,
    sigma: *const f64,
    d: usize,
    out: *mut f64,
    clamped: *mut usize,
) -> SclStatus {
    guard(|| {
        let (v, c) = su::kl_loguniform(slice(mu, d, "mu")?, slice(sigma, d, "sigma")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        if let Some(c_out) = clamped.as_mut() {
            *c_out = c;
        }
        Ok(())
    })
}

/// Loads a CU checkpoint written by `semcom train-cu`.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn scl_cu_load(path: *const c_char, out: *mut *mut SclCu) -> SclStatus {
    guard(|| {
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        store(out, SclCu(CuModel::from_checkpoint(&ckpt)?))
    })
}

/// # Safety
/// `cu` must be null or a live handle from [`scl_cu_load`].
#[no_mangle]
pub unsafe extern "C" fn scl_cu_input_dim(cu: *const SclCu) -> usize {
    cu.as_ref().map_or(0, |c| c.0.input_dim())
}

/// # Safety
/// `cu` must be null or a live handle from [`scl_cu_load`].
#[no_mangle]
pub unsafe extern "C" fn scl_cu_latent_dim(cu: *const SclCu) -> usize {
    cu.as_ref().map_or(0, |c| c.0.latent_dim())
}

/// Encoder mean and standard deviation for `n` observations.
///
/// # Safety
/// `images` holds `n * input_dim` doubles; `mu_out` and `sigma_out` each
/// have room for `n * latent_dim`.
#[no_mangle]
pub unsafe extern "C" fn scl_cu_encode(
    cu: *const SclCu,
    images: *const f64,
    n: usize,
    mu_out: *mut f64,
    sigma_out: *mut f64,
) -> SclStatus {
    guard(|| {
        let c = handle(cu, "cu")?;
        let x = matrix(images, n, c.0.input_dim(), "images")?.to_owned();
        let lat = c.0.encode(&x)?;
        let len = n * c.0.latent_dim();
        copy_out(&lat.mu, slice_mut(mu_out, len, "mu_out")?);
        copy_out(&lat.sigma, slice_mut(sigma_out, len, "sigma_out")?);
        Ok(())
    })
}

/// # Safety
/// `cu` must be null or a live handle from [`scl_cu_load`], not used again.
#[no_mangle]
pub unsafe extern "C" fn scl_cu_free(cu: *mut SclCu) {
    if !cu.is_null() {
        drop(Box::from_raw(cu));
    }
}

/// Loads an SU checkpoint written by `semcom train-su`.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn scl_su_load(path: *const c_char, out: *mut *mut SclSu) -> SclStatus {
    guard(|| {
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        store(out, SclSu(SuModel::from_checkpoint(&ckpt)?))
    })
}

/// Task id (1 binary, 2 digit), 0 for a null handle.
///
/// # Safety
/// `su` must be null or a live handle from [`scl_su_load`].
#[no_mangle]
pub unsafe extern "C" fn scl_su_task(su: *const SclSu) -> u8 {
    su.as_ref().map_or(0, |s| s.0.task.id())
}

/// # Safety
/// `su` must be null or a live handle from [`scl_su_load`].
#[no_mangle]
pub unsafe extern "C" fn scl_su_input_dim(su: *const SclSu) -> usize {
    su.as_ref().map_or(0, |s| s.0.input_dim())
}

/// Number of channel uses `d`.
///
/// # Safety
/// `su` must be null or a live handle from [`scl_su_load`].
#[no_mangle]
pub unsafe extern "C" fn scl_su_channel_dim(su: *const SclSu) -> usize {
    su.as_ref().map_or(0, |s| s.0.d())
}

/// Width of the decoder output: 1 for the binary task, 10 for digits.
///
/// # Safety
/// `su` must be null or a live handle from [`scl_su_load`].
#[no_mangle]
pub unsafe extern "C" fn scl_su_output_dim(su: *const SclSu) -> usize {
    su.as_ref().map_or(0, |s| s.0.task.head_dim())
}

/// Channel-input mean and standard deviation for `n` CU representations.
///
/// # Safety
/// `c` holds `n * input_dim` doubles; outputs have room for `n * d` each.
#[no_mangle]
pub unsafe extern "C" fn scl_su_encode(
    su: *const SclSu,
    c: *const f64,
    n: usize,
    mu_out: *mut f64,
    sigma_out: *mut f64,
) -> SclStatus {
    guard(|| {
        let s = handle(su, "su")?;
        let x = matrix(c, n, s.0.input_dim(), "c")?.to_owned();
        let lat = s.0.encode(&x)?;
        let len = n * s.0.d();
        copy_out(&lat.mu, slice_mut(mu_out, len, "mu_out")?);
        copy_out(&lat.sigma, slice_mut(sigma_out, len, "sigma_out")?);
        Ok(())
    })
}

/// Decoder probabilities for `n` received channel outputs, plus the hard
/// decision per row when `labels_out` is not null.
///
/// # Safety
/// `received` holds `n * d` doubles; `probs_out` has room for
/// `n * output_dim`; `labels_out` is null or has room for `n`.
#[no_mangle]
pub unsafe extern "C" fn scl_su_decode(
    su: *const SclSu,
    received: *const f64,
    n: usize,
    probs_out: *mut f64,
    labels_out: *mut u32,
) -> SclStatus {
    guard(|| {
        let s = handle(su, "su")?;
        let y = matrix(received, n, s.0.d(), "received")?.to_owned();
        let probs = s.0.decoder.predict(&y)?;
        copy_out(&probs, slice_mut(probs_out, n * s.0.task.head_dim(), "probs_out")?);
        if !labels_out.is_null() && n > 0 {
            let labels = std::slice::from_raw_parts_mut(labels_out, n);
            for (l, d) in labels.iter_mut().zip(s.0.task.decide(&probs)) {
                *l = d as u32;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `su` must be null or a live handle from [`scl_su_load`], not used again.
#[no_mangle]
pub unsafe extern "C" fn scl_su_free(su: *mut SclSu) {
    if !su.is_null() {
        drop(Box::from_raw(su));
    }
}
