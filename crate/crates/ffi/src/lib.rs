//! C interface to `koopman_lqr`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a [`KlStatus`] and
//! stores a message retrievable with [`kl_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use koopman_lqr::data::{build_pairs, sample_landmarks, SamplingStrategy};
use koopman_lqr::experiments::load_trajectory_path;
use koopman_lqr::identify::{fit, KoopmanModel, Lifting};
use koopman_lqr::kernels::{KernelFamily, KernelSpec};
use koopman_lqr::lqr::{build_weights, solve_dare, solve_model_dare_or_last, DareOptions, LqrWeights, Policy};
use koopman_lqr::numerics::{mat_from_rows, mat_to_rows, RankTolerance};
use koopman_lqr::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    NonFinite = 4,
    NotConverged = 5,
    Io = 6,
    Parse = 7,
    Numerical = 8,
    Panic = 9,
}

/// Kernel families accepted by [`kl_model_fit_csv`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlKernel {
    Rbf = 0,
    Matern52 = 1,
    Matern32 = 2,
}

/// Fitted surrogate model.
pub struct KlModel {
    inner: KoopmanModel,
}

/// LQR state-feedback law for a model.
pub struct KlController {
    policy: Policy,
    n_u: usize,
    d: usize,
    converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> KlStatus {
    match err {
        Error::Dimension(_) => KlStatus::Dimension,
        Error::NonFinite(_) => KlStatus::NonFinite,
        Error::InvalidArgument(_) | Error::Empty(_) | Error::Precondition(_) => KlStatus::InvalidArgument,
        Error::NotConverged { .. } => KlStatus::NotConverged,
        Error::Io(_) => KlStatus::Io,
        Error::Malformed(_) | Error::Csv(_) | Error::Json(_) => KlStatus::Parse,
        Error::Singular(_) | Error::Eigen(_) | Error::Diverged(_) => KlStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), KlStatus>) -> KlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            KlStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            KlStatus::Panic
        }
    }
}

fn fail(err: Error) -> KlStatus {
    let s = status_of(&err);
    set_error(err.to_string());
    s
}

fn null(what: &str) -> KlStatus {
    set_error(format!("null pointer: {what}"));
    KlStatus::NullPointer
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, KlStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("path is not valid UTF-8".into());
        KlStatus::InvalidArgument
    })?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], KlStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn rows(data: &[f64], nrows: usize, ncols: usize) -> Vec<Vec<f64>> {
    (0..nrows).map(|i| data[i * ncols..(i + 1) * ncols].to_vec()).collect()
}

/// Copies the message of the last failed call on this thread into `buf`,
/// truncated and NUL-terminated. Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn kl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Fits a Nyström model on trajectories read from a CSV file or a directory
/// of CSV files. Landmarks are drawn independently on both sides.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kl_model_fit_csv(
    path: *const c_char,
    kernel: KlKernel,
    lengthscale: f64,
    m: usize,
    gamma: f64,
    seed: u64,
    out: *mut *mut KlModel,
) -> KlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let family = match kernel {
            KlKernel::Rbf => KernelFamily::Rbf,
            KlKernel::Matern52 => KernelFamily::Matern52,
            KlKernel::Matern32 => KernelFamily::Matern32,
        };
        let model = (|| {
            let ds = build_pairs(&load_trajectory_path(path)?)?;
            let kernel = KernelSpec::new(family, lengthscale, 1.0)?;
            let landmarks = sample_landmarks(&ds, m, SamplingStrategy::IndependentUniform, seed)?;
            fit(&ds, &Lifting::Nystrom { kernel, landmarks }, gamma, gamma, RankTolerance::default())
        })()
        .map_err(fail)?;
        *out = Box::into_raw(Box::new(KlModel { inner: model }));
        Ok(())
    })
}

/// Loads a model saved as JSON.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kl_model_load(path: *const c_char, out: *mut *mut KlModel) -> KlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = KoopmanModel::load(path_arg(path)?).map_err(fail)?;
        *out = Box::into_raw(Box::new(KlModel { inner: model }));
        Ok(())
    })
}

/// Writes the model as JSON.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn kl_model_save(model: *const KlModel, path: *const c_char) -> KlStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        model.inner.save(path_arg(path)?).map_err(fail)
    })
}

/// State dimension, control dimension and lifted dimension.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kl_model_dims(model: *const KlModel, d: *mut usize, n_u: *mut usize, m: *mut usize) -> KlStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if d.is_null() || n_u.is_null() || m.is_null() {
            return Err(null("dims"));
        }
        *d = model.inner.state_dim();
        *n_u = model.inner.control_dim();
        *m = model.inner.m();
        Ok(())
    })
}

/// Open-loop forecast. `controls` holds `steps` rows of `n_u` values; `out`
/// receives `steps + 1` rows of `d` values starting with `x0`.
///
/// # Safety
/// Buffers must have the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn kl_model_forecast(
    model: *const KlModel,
    x0: *const f64,
    controls: *const f64,
    steps: usize,
    out: *mut f64,
) -> KlStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let (d, nu) = (model.state_dim(), model.control_dim());
        let x0 = slice_arg(x0, d, "x0")?;
        let us = rows(slice_arg(controls, steps * nu, "controls")?, steps, nu);
        if out.is_null() {
            return Err(null("out"));
        }
        let xs = model.forecast(x0, &us).map_err(fail)?;
        let dst = std::slice::from_raw_parts_mut(out, (steps + 1) * d);
        for (chunk, x) in dst.chunks_mut(d).zip(&xs) {
            chunk.copy_from_slice(x);
        }
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kl_model_free(model: *mut KlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Builds the LQR law for `Σ xᵀQ'x + uᵀRu` (row-major `d×d` and `n_u×n_u`).
/// When the Riccati iteration exhausts its budget the last iterate is used
/// and [`kl_controller_converged`] reports 0.
///
/// # Safety
/// Buffers must have the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn kl_controller_new(
    model: *const KlModel,
    qprime: *const f64,
    r: *const f64,
    out: *mut *mut KlController,
) -> KlStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let (d, nu) = (model.state_dim(), model.control_dim());
        let q = mat_from_rows(&rows(slice_arg(qprime, d * d, "qprime")?, d, d));
        let r = mat_from_rows(&rows(slice_arg(r, nu * nu, "r")?, nu, nu));
        let (policy, converged) = (|| {
            let w = build_weights(model, q.as_ref(), r.as_ref())?;
            let (sol, converged) = solve_model_dare_or_last(model, &w, &DareOptions::default())?;
            Ok::<_, Error>((Policy::new(model, sol.k.as_ref(), None)?, converged))
        })()
        .map_err(fail)?;
        *out = Box::into_raw(Box::new(KlController { policy, n_u: nu, d, converged }));
        Ok(())
    })
}

/// Writes `n_u` control values for state `x` (length `d`).
///
/// # Safety
/// Buffers must have the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn kl_controller_control(ctrl: *const KlController, x: *const f64, u: *mut f64) -> KlStatus {
    guard(|| {
        let ctrl = ctrl.as_ref().ok_or_else(|| null("controller"))?;
        let x = slice_arg(x, ctrl.d, "x")?;
        if u.is_null() {
            return Err(null("u"));
        }
        let v = ctrl.policy.control(x);
        std::slice::from_raw_parts_mut(u, ctrl.n_u).copy_from_slice(&v);
        Ok(())
    })
}

/// 1 when the Riccati iteration met its tolerance, 0 otherwise or on null.
///
/// # Safety
/// `ctrl` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn kl_controller_converged(ctrl: *const KlController) -> i32 {
    ctrl.as_ref().map_or(0, |c| i32::from(c.converged))
}

/// Releases a controller. Null is ignored.
///
/// # Safety
/// `ctrl` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kl_controller_free(ctrl: *mut KlController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Solves `P = Q + AᵀPA − AᵀPB(R + BᵀPB)^{-1}BᵀPA` for an `n`-state,
/// `k`-input system (row-major buffers). Writes `P` (`n×n`) and the gain
/// `K` (`k×n`, `u = Kx`).
///
/// # Safety
/// Buffers must have the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn kl_dare_solve(
    a: *const f64,
    b: *const f64,
    q: *const f64,
    r: *const f64,
    n: usize,
    k: usize,
    p_out: *mut f64,
    k_out: *mut f64,
) -> KlStatus {
    guard(|| {
        if p_out.is_null() || k_out.is_null() {
            return Err(null("output"));
        }
        let a = mat_from_rows(&rows(slice_arg(a, n * n, "a")?, n, n));
        let b = mat_from_rows(&rows(slice_arg(b, n * k, "b")?, n, k));
        let q = mat_from_rows(&rows(slice_arg(q, n * n, "q")?, n, n));
        let r = mat_from_rows(&rows(slice_arg(r, k * k, "r")?, k, k));
        let sol = LqrWeights::new(q, r)
            .and_then(|w| solve_dare(a.as_ref(), b.as_ref(), &w, &DareOptions::default()))
            .map_err(fail)?;
        let p: Vec<f64> = mat_to_rows(sol.p.as_ref()).concat();
        let kk: Vec<f64> = mat_to_rows(sol.k.as_ref()).concat();
        std::slice::from_raw_parts_mut(p_out, n * n).copy_from_slice(&p);
        std::slice::from_raw_parts_mut(k_out, k * n).copy_from_slice(&kk);
        Ok(())
    })
}
