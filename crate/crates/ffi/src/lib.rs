//! C ABI over `genmatch`.
//!
//! Every function returns a [`GmStatus`]. On failure a message is kept per
//! thread and can be read with [`gm_last_error_message`]. Models are opaque
//! handles released with [`gm_model_free`]; strings handed out by the
//! library are released with [`gm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use genmatch::config::DatasetSpec;
use genmatch::loss::Bregman;
use genmatch::marginal::Combinators;
use genmatch::sim::{jump_survival, simulate, SimConfig};
use genmatch::verify::{run_kfe_suite, KfeSuite, PairReport};
use genmatch::{CondPath, Error, GeneratorSpec, JumpBins, MarginalModel, State};
use serde::Deserialize;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Domain = 4,
    Shape = 5,
    Singularity = 6,
    Runtime = 7,
    Panic = 8,
}

impl From<&Error> for GmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => GmStatus::Config,
            Error::Domain(_) | Error::Range(_) | Error::Coverage(_) => GmStatus::Domain,
            Error::Shape(_) => GmStatus::Shape,
            Error::Singularity { .. } | Error::DegenerateDensity(_) => GmStatus::Singularity,
            _ => GmStatus::Runtime,
        }
    }
}

/// Exact marginal model handle.
pub struct GmModel {
    model: MarginalModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

type Fallible = std::result::Result<(), (GmStatus, String)>;

fn fail(e: Error) -> (GmStatus, String) {
    ((&e).into(), e.to_string())
}

fn guard(f: impl FnOnce() -> Fallible) -> GmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GmStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("panic inside genmatch");
            GmStatus::Panic
        }
    }
}

fn null() -> (GmStatus, String) {
    (GmStatus::NullPointer, "null pointer argument".into())
}

unsafe fn str_arg<'a>(p: *const c_char) -> std::result::Result<&'a str, (GmStatus, String)> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|e| (GmStatus::InvalidUtf8, e.to_string()))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize) -> std::result::Result<&'a [T], (GmStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn out_string(s: String, out: *mut *mut c_char) -> Fallible {
    let c = CString::new(s).map_err(|e| (GmStatus::Runtime, e.to_string()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpec {
    path: CondPath,
    dataset: DatasetSpec,
    #[serde(default)]
    generator: GeneratorSpec,
    #[serde(default)]
    combinators: Combinators,
    #[serde(default)]
    bins: JumpBins,
}

/// Builds a model from JSON with keys `path`, `dataset`, and optionally
/// `generator`, `combinators` and `bins`, in the experiment config format.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gm_model_from_json(json: *const c_char, out: *mut *mut GmModel) -> GmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let text = str_arg(json)?;
        let spec: ModelSpec = serde_json::from_str(text).map_err(|e| (GmStatus::Config, e.to_string()))?;
        let data = spec.dataset.load().map_err(fail)?;
        let model = MarginalModel::with(spec.path, data, spec.generator, spec.bins, spec.combinators).map_err(fail)?;
        *out = Box::into_raw(Box::new(GmModel { model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`gm_model_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gm_model_free(model: *mut GmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of Euclidean coordinates and of token coordinates.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gm_model_dims(model: *const GmModel, euclid: *mut usize, discrete: *mut usize) -> GmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        if euclid.is_null() || discrete.is_null() {
            return Err(null());
        }
        let sig = m.model.signature();
        *euclid = sig.euclid;
        *discrete = sig.discrete;
        Ok(())
    })
}

/// Marginal velocity at `(t, x)` for models without token coordinates.
/// `x` and `out` hold `n` values.
///
/// # Safety
/// `x` and `out` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn gm_model_velocity(model: *const GmModel, t: f64, x: *const f64, n: usize, out: *mut f64) -> GmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        let xs = slice_arg(x, n)?;
        if out.is_null() {
            return Err(null());
        }
        let sig = m.model.signature();
        if sig.discrete != 0 || sig.euclid != n {
            return Err((GmStatus::Shape, format!("model has {sig:?}, got {n} coordinates")));
        }
        let g = m.model.genout(t, &State::euclid(xs.to_vec())).map_err(fail)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&g.velocity);
        Ok(())
    })
}

/// Full generator at `(t, state)` as JSON: `velocity`, `diffusion`,
/// `jump_intensity` (0 where there is no jump) and `rates`. Free the string
/// with [`gm_string_free`].
///
/// # Safety
/// `x` must point to `n_x` doubles, `tokens` to `n_tok` sizes, `out` must
/// be valid.
#[no_mangle]
pub unsafe extern "C" fn gm_model_genout_json(
    model: *const GmModel,
    t: f64,
    x: *const f64,
    n_x: usize,
    tokens: *const usize,
    n_tok: usize,
    out: *mut *mut c_char,
) -> GmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        let s = State { x: slice_arg(x, n_x)?.to_vec(), tokens: slice_arg(tokens, n_tok)?.to_vec() };
        let g = m.model.genout(t, &s).map_err(fail)?;
        let intensity: Vec<f64> = g.jumps.iter().map(|j| j.as_ref().map_or(0.0, |j| j.intensity)).collect();
        let v = serde_json::json!({
            "velocity": g.velocity,
            "diffusion": g.diffusion,
            "jump_intensity": intensity,
            "rates": g.rates,
        });
        out_string(v.to_string(), out)
    })
}

/// Samples `n_samples` final states of a model without token coordinates
/// into `out` (row major, `n_samples * euclid` doubles).
///
/// # Safety
/// `out` must point to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gm_simulate(
    model: *const GmModel,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> GmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        let sig = m.model.signature();
        if sig.discrete != 0 {
            return Err((GmStatus::Shape, "gm_simulate handles Euclidean models only".into()));
        }
        if out.is_null() {
            return Err(null());
        }
        if out_len != n_samples * sig.euclid {
            return Err((GmStatus::Shape, format!("out needs {} doubles, got {out_len}", n_samples * sig.euclid)));
        }
        let cfg = SimConfig {
            n_steps,
            n_samples,
            seed,
            reflection_bounds: m.model.path.reflection_bounds(),
            ..SimConfig::default()
        };
        let s = simulate(&m.model, &cfg).map_err(fail)?;
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for (row, st) in dst.chunks_mut(sig.euclid.max(1)).zip(&s.finals) {
            row.copy_from_slice(&st.x);
        }
        Ok(())
    })
}

/// Runs the KFE residual suite. `suite_json` may be null for the default
/// sweep. Writes the per-pair report as JSON and whether every pair and
/// control passed.
///
/// # Safety
/// `suite_json` is null or NUL-terminated; `out` and `all_pass` are valid.
#[no_mangle]
pub unsafe extern "C" fn gm_verify_kfe_json(suite_json: *const c_char, out: *mut *mut c_char, all_pass: *mut bool) -> GmStatus {
    guard(|| {
        if out.is_null() || all_pass.is_null() {
            return Err(null());
        }
        let suite: KfeSuite = if suite_json.is_null() {
            KfeSuite::default()
        } else {
            serde_json::from_str(str_arg(suite_json)?).map_err(|e| (GmStatus::Config, e.to_string()))?
        };
        let pairs = run_kfe_suite(&suite).map_err(fail)?;
        *all_pass = pairs.iter().all(PairReport::ok);
        out_string(serde_json::to_string(&pairs).map_err(|e| (GmStatus::Runtime, e.to_string()))?, out)
    })
}

/// Releases a string returned by the library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Probability of no jump on `[t, t + h]` under the CondOT jump intensity
/// `lambda` measured at `t`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gm_jump_survival(lambda: f64, t: f64, h: f64, out: *mut f64) -> GmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        *out = jump_survival(lambda, t, h).map_err(fail)?;
        Ok(())
    })
}

/// Bregman divergence `D(a, b)` by name (`mse`, `rate_kl`, `mse_cosh:1`,
/// `mse_exp:1`, ...).
///
/// # Safety
/// `a` and `b` must point to `n` doubles, `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gm_bregman_value(name: *const c_char, a: *const f64, b: *const f64, n: usize, out: *mut f64) -> GmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let d: Bregman = str_arg(name)?.parse().map_err(fail)?;
        *out = d.value(slice_arg(a, n)?, slice_arg(b, n)?).map_err(fail)?;
        Ok(())
    })
}
