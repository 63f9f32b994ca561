//! C interface to `fup_lab`.
//!
//! Objects cross the boundary as opaque handles created by the
//! `fup_measure_*` and `fup_schottky_*` constructors and released with the
//! matching `*_free`. Every fallible call
//! returns a [`FupStatus`]; on failure a message for the calling thread is
//! available from [`fup_last_error`]. Panics are caught and reported as
//! [`FupStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fup_lab::cantor::{fup_norm, CantorSpec};
use fup_lab::cli::{parse_config, run_config, ExperimentConfig};
use fup_lab::fio::{build_fio, operator_norm};
use fup_lab::measures::{make_cantor_measure, random_cloud, FractalMeasure, Phase};
use fup_lab::regularity::{estimate_regularity, ScaleRange};
use fup_lab::schottky::{circle_margin, figure_disks, make_schottky, sample_limit_set, Disk, SchottkyGroup};
use fup_lab::{Budget, Error};

/// Result codes. Values 1 to 4 agree with the exit codes of the `fup-lab` binary.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FupStatus {
    Ok = 0,
    Invariant = 1,
    InvalidInput = 2,
    Budget = 3,
    NonConvergence = 4,
    Io = 5,
    NullPointer = 6,
    Panic = 7,
}

/// A finite weighted point set.
pub struct FupMeasure(FractalMeasure);

/// A Schottky group with its defining disks.
pub struct FupSchottky(SchottkyGroup);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FupStatus {
    match e {
        Error::InvalidInput(_) | Error::Json(_) | Error::Csv(_) => FupStatus::InvalidInput,
        Error::Io { .. } => FupStatus::Io,
        Error::Budget { .. } => FupStatus::Budget,
        Error::NonConvergence { .. } => FupStatus::NonConvergence,
        Error::Invariant { .. } => FupStatus::Invariant,
    }
}

fn guard<F: FnOnce() -> Result<(), FupStatus>>(f: F) -> FupStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FupStatus::Ok,
        Ok(Err(s)) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            FupStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, FupStatus>;
}

impl<T> OrStatus<T> for fup_lab::Result<T> {
    fn or_status(self) -> Result<T, FupStatus> {
        self.map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })
    }
}

fn null(what: &str) -> FupStatus {
    set_error(format!("{what} is null"));
    FupStatus::NullPointer
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], FupStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, FupStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, FupStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, FupStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        FupStatus::InvalidInput
    })
}

fn budget() -> Budget {
    Budget::from_env()
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fup_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fup_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Uniform measure on the level-`k` Cantor set with base `m` and digit set `digits`.
///
/// # Safety
/// `digits` must point to `n_digits` values and `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fup_measure_cantor(
    m: u32,
    digits: *const u32,
    n_digits: usize,
    k: u32,
    result: *mut *mut FupMeasure,
) -> FupStatus {
    guard(|| {
        let result = out(result, "result")?;
        let a = slice(digits, n_digits, "digits")?;
        let spec = CantorSpec::line(m, a, a, k);
        spec.validate().or_status()?;
        let mu = make_cantor_measure(&spec, &budget()).or_status()?;
        *result = Box::into_raw(Box::new(FupMeasure(mu)));
        Ok(())
    })
}

/// `count` uniform random points in `[0,1]^dim`.
///
/// # Safety
/// `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fup_measure_cloud(
    dim: usize,
    count: usize,
    scale_floor: f64,
    seed: u64,
    result: *mut *mut FupMeasure,
) -> FupStatus {
    guard(|| {
        let result = out(result, "result")?;
        let mu = random_cloud(dim, count, scale_floor, seed).or_status()?;
        *result = Box::into_raw(Box::new(FupMeasure(mu)));
        Ok(())
    })
}

/// # Safety
/// `mu` must come from a `fup_measure_*` constructor, or be null.
#[no_mangle]
pub unsafe extern "C" fn fup_measure_free(mu: *mut FupMeasure) {
    if !mu.is_null() {
        drop(Box::from_raw(mu));
    }
}

/// Number of atoms, or 0 for a null handle.
///
/// # Safety
/// `mu` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fup_measure_len(mu: *const FupMeasure) -> usize {
    mu.as_ref().map_or(0, |m| m.0.len())
}

/// Ambient dimension, or 0 for a null handle.
///
/// # Safety
/// `mu` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fup_measure_dim(mu: *const FupMeasure) -> usize {
    mu.as_ref().map_or(0, |m| m.0.dim)
}

/// Copies atom coordinates (row-major, `len * dim` values) and weights
/// (`len` values) into caller buffers. Either buffer may be null to skip it.
///
/// # Safety
/// Non-null buffers must hold at least the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn fup_measure_copy(mu: *const FupMeasure, coords: *mut f64, weights: *mut f64) -> FupStatus {
    guard(|| {
        let mu = &borrow(mu, "measure")?.0;
        if !coords.is_null() {
            let dst = std::slice::from_raw_parts_mut(coords, mu.len() * mu.dim);
            for (chunk, atom) in dst.chunks_exact_mut(mu.dim).zip(&mu.atoms) {
                chunk.copy_from_slice(atom);
            }
        }
        if !weights.is_null() {
            std::slice::from_raw_parts_mut(weights, mu.len()).copy_from_slice(&mu.weights);
        }
        Ok(())
    })
}

/// Norm of the Cantor DFT submatrix `1_{C_k} F_N 1_{C_k'}` for `N = m^k`.
///
/// # Safety
/// Digit pointers must hold the stated counts; `norm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fup_cantor_norm(
    m: u32,
    a: *const u32,
    n_a: usize,
    b: *const u32,
    n_b: usize,
    k: u32,
    norm: *mut f64,
) -> FupStatus {
    guard(|| {
        let norm = out(norm, "norm")?;
        let spec = CantorSpec::line(m, slice(a, n_a, "a")?, slice(b, n_b, "b")?, k);
        spec.validate().or_status()?;
        *norm = fup_norm(&spec, &budget()).or_status()?.r;
        Ok(())
    })
}

/// Upper regularity constant of `mu` with exponent `delta` over dyadic scales in `[alpha, beta]`.
///
/// # Safety
/// `mu` must be a live handle and `value` writable.
#[no_mangle]
pub unsafe extern "C" fn fup_regularity_constant(
    mu: *const FupMeasure,
    alpha: f64,
    beta: f64,
    delta: f64,
    value: *mut f64,
) -> FupStatus {
    guard(|| {
        let value = out(value, "value")?;
        let mu = &borrow(mu, "measure")?.0;
        let range = ScaleRange::new(alpha, beta).or_status()?;
        *value = estimate_regularity(mu, &range, delta).or_status()?.value;
        Ok(())
    })
}

/// Operator norm of `f -> integral exp(-i x.y / h) f(y) dmu_y` from
/// `L^2(mu_y)` to `L^2(mu_x)`.
///
/// # Safety
/// Both handles must be live; `norm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fup_fio_norm(
    mu_x: *const FupMeasure,
    mu_y: *const FupMeasure,
    h: f64,
    norm: *mut f64,
) -> FupStatus {
    guard(|| {
        let norm = out(norm, "norm")?;
        let x = &borrow(mu_x, "mu_x")?.0;
        let y = &borrow(mu_y, "mu_y")?.0;
        if x.dim != y.dim {
            set_error("measures have different dimensions".into());
            return Err(FupStatus::InvalidInput);
        }
        let phase = Phase::dot(x.dim, 1.0);
        let mat = build_fio(x, y, &phase, h, &budget()).or_status()?;
        *norm = operator_norm(&mat).or_status()?.sigma;
        Ok(())
    })
}

/// Schottky group from `n` disks given by centre coordinates and radii.
/// Disk `i` is paired with disk `i + n/2`.
///
/// # Safety
/// The three arrays must hold `n` values; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fup_schottky_from_disks(
    cx: *const f64,
    cy: *const f64,
    r: *const f64,
    n: usize,
    result: *mut *mut FupSchottky,
) -> FupStatus {
    guard(|| {
        let result = out(result, "result")?;
        let (cx, cy, r) = (slice(cx, n, "cx")?, slice(cy, n, "cy")?, slice(r, n, "r")?);
        let disks = (0..n)
            .map(|i| Disk::new(cx[i], cy[i], r[i]))
            .collect::<fup_lab::Result<Vec<_>>>()
            .or_status()?;
        let g = make_schottky(&disks).or_status()?;
        *result = Box::into_raw(Box::new(FupSchottky(g)));
        Ok(())
    })
}

/// The built-in genus-two configuration of four unit disks.
///
/// # Safety
/// `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fup_schottky_default(result: *mut *mut FupSchottky) -> FupStatus {
    guard(|| {
        let result = out(result, "result")?;
        let g = make_schottky(&figure_disks()).or_status()?;
        *result = Box::into_raw(Box::new(FupSchottky(g)));
        Ok(())
    })
}

/// # Safety
/// `g` must come from a `fup_schottky_*` constructor, or be null.
#[no_mangle]
pub unsafe extern "C" fn fup_schottky_free(g: *mut FupSchottky) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Genus, or 0 for a null handle.
///
/// # Safety
/// `g` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fup_schottky_genus(g: *const FupSchottky) -> usize {
    g.as_ref().map_or(0, |g| g.0.genus)
}

/// Largest distance by which every line or circle in the plane misses at
/// least one of the four disks (genus two only).
///
/// # Safety
/// `g` must be live; `margin` writable.
#[no_mangle]
pub unsafe extern "C" fn fup_schottky_circle_margin(g: *const FupSchottky, margin: *mut f64) -> FupStatus {
    guard(|| {
        let margin = out(margin, "margin")?;
        let g = &borrow(g, "group")?.0;
        *margin = circle_margin(&g.disks).or_status()?.margin;
        Ok(())
    })
}

/// Limit set sampled by one point per reduced word of length `depth`, as a
/// uniform measure in the unit square.
///
/// # Safety
/// `g` must be live; `result` writable.
#[no_mangle]
pub unsafe extern "C" fn fup_schottky_limit_set(
    g: *const FupSchottky,
    depth: usize,
    result: *mut *mut FupMeasure,
) -> FupStatus {
    guard(|| {
        let result = out(result, "result")?;
        let g = &borrow(g, "group")?.0;
        let limit = sample_limit_set(g, depth, &budget()).or_status()?;
        *result = Box::into_raw(Box::new(FupMeasure(limit.measure)));
        Ok(())
    })
}

/// Runs an experiment config (the JSON accepted by `fup-lab run`). A
/// non-null `output_dir` replaces the directory named in the config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `output_dir` likewise or null.
#[no_mangle]
pub unsafe extern "C" fn fup_run_config(config_json: *const c_char, output_dir: *const c_char) -> FupStatus {
    guard(|| {
        let text = string(config_json, "config_json")?;
        let mut cfg: ExperimentConfig = parse_config(&text).or_status()?;
        if !output_dir.is_null() {
            cfg.output_dir = PathBuf::from(string(output_dir, "output_dir")?);
        }
        run_config(&cfg, None).or_status()?;
        Ok(())
    })
}

