//! C ABI over the quantizers, observers and models of `qmlp`.
//!
//! Every fallible function returns a [`QmlpStatus`]. On failure the message
//! is kept per thread and can be read with [`qmlp_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use qmlp::data::parse_config;
use qmlp::models::{checkpoint, Model, Plain};
use qmlp::quant::{self, QuantParams, RangeObserver, Scheme};
use qmlp::{Error, IntTensor, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QmlpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numeric = 4,
    Format = 5,
    Io = 6,
    Config = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QmlpScheme {
    Symmetric = 0,
    Asymmetric = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QmlpObserverKind {
    MinMax = 0,
    /// `param` is the momentum.
    Ema = 1,
    /// `param` is the percentile `p`.
    Percentile = 2,
}

/// Per-tensor quantizer parameters.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QmlpQParams {
    pub scale: f64,
    pub zero_point: i64,
    pub bits: u8,
    pub scheme: QmlpScheme,
}

/// Streaming range observer.
pub struct QmlpObserver {
    inner: RangeObserver,
}

/// Mixer-family model with its parameters.
pub struct QmlpModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> QmlpStatus {
    match e.root() {
        Error::Dimension { .. } => QmlpStatus::Dimension,
        Error::Numeric(_) | Error::Diverged { .. } => QmlpStatus::Numeric,
        Error::Format(_) | Error::Csv(_) | Error::Json(_) => QmlpStatus::Format,
        Error::Io { .. } => QmlpStatus::Io,
        Error::Config { .. } | Error::Parse { .. } => QmlpStatus::Config,
        _ => QmlpStatus::InvalidArgument,
    }
}

struct Fail(QmlpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(QmlpStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> QmlpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            QmlpStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            QmlpStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(QmlpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn scheme(s: QmlpScheme) -> Scheme {
    match s {
        QmlpScheme::Symmetric => Scheme::Symmetric,
        QmlpScheme::Asymmetric => Scheme::Asymmetric,
    }
}

unsafe fn qparams(qp: *const QmlpQParams) -> Result<QuantParams, Fail> {
    let qp = qp.as_ref().ok_or_else(|| null("qparams"))?;
    Ok(QuantParams::per_tensor(qp.scale, qp.zero_point, qp.bits, scheme(qp.scheme))?)
}

/// Message of the last failed call on this thread, or null when the last
/// call succeeded. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn qmlp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qmlp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Scale and zero point for the range `[r_min, r_max]`.
#[no_mangle]
pub unsafe extern "C" fn qmlp_compute_qparams(
    r_min: f64,
    r_max: f64,
    bits: u8,
    scheme_kind: QmlpScheme,
    out: *mut QmlpQParams,
) -> QmlpStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let qp = quant::compute_qparams(r_min, r_max, bits, scheme(scheme_kind))?;
        *out = QmlpQParams {
            scale: qp.scale(),
            zero_point: qp.zero_point(),
            bits,
            scheme: scheme_kind,
        };
        Ok(())
    })
}

/// `q = clamp(round(x / S) + Z0)` for `n` values.
#[no_mangle]
pub unsafe extern "C" fn qmlp_quantize(qp: *const QmlpQParams, x: *const f64, n: usize, out: *mut i32) -> QmlpStatus {
    guard(|| {
        let qp = qparams(qp)?;
        let x = slice(x, n, "x")?;
        let out = slice_mut(out, n, "out")?;
        let q = quant::quantize(&Tensor::vector(x.to_vec()), &qp)?;
        out.copy_from_slice(q.data());
        Ok(())
    })
}

/// `r = S·(q − Z0)` for `n` values.
#[no_mangle]
pub unsafe extern "C" fn qmlp_dequantize(qp: *const QmlpQParams, q: *const i32, n: usize, out: *mut f64) -> QmlpStatus {
    guard(|| {
        let qp = qparams(qp)?;
        let q = slice(q, n, "q")?;
        let out = slice_mut(out, n, "out")?;
        let r = quant::dequantize(&IntTensor::new(vec![n], q.to_vec())?, &qp)?;
        out.copy_from_slice(r.data());
        Ok(())
    })
}

/// Quantize then dequantize `n` values.
#[no_mangle]
pub unsafe extern "C" fn qmlp_fake_quant(qp: *const QmlpQParams, x: *const f64, n: usize, out: *mut f64) -> QmlpStatus {
    guard(|| {
        let qp = qparams(qp)?;
        let x = slice(x, n, "x")?;
        let out = slice_mut(out, n, "out")?;
        let r = quant::fake_quant(&Tensor::vector(x.to_vec()), &qp)?;
        out.copy_from_slice(r.data());
        Ok(())
    })
}

/// Creates an observer. `param` is ignored for min/max.
#[no_mangle]
pub unsafe extern "C" fn qmlp_observer_new(kind: QmlpObserverKind, param: f64, out: *mut *mut QmlpObserver) -> QmlpStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let inner = match kind {
            QmlpObserverKind::MinMax => RangeObserver::minmax(),
            QmlpObserverKind::Ema => RangeObserver::ema(param)?,
            QmlpObserverKind::Percentile => RangeObserver::percentile(param)?,
        };
        *out = Box::into_raw(Box::new(QmlpObserver { inner }));
        Ok(())
    })
}

/// Feeds one batch of `n` values.
#[no_mangle]
pub unsafe extern "C" fn qmlp_observer_observe(obs: *mut QmlpObserver, x: *const f64, n: usize) -> QmlpStatus {
    guard(|| {
        let obs = obs.as_mut().ok_or_else(|| null("observer"))?;
        obs.inner.observe(slice(x, n, "x")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qmlp_observer_range(obs: *const QmlpObserver, r_min: *mut f64, r_max: *mut f64) -> QmlpStatus {
    guard(|| {
        let obs = obs.as_ref().ok_or_else(|| null("observer"))?;
        let lo = r_min.as_mut().ok_or_else(|| null("r_min"))?;
        let hi = r_max.as_mut().ok_or_else(|| null("r_max"))?;
        (*lo, *hi) = obs.inner.finalize()?;
        Ok(())
    })
}

/// Releases an observer. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn qmlp_observer_free(obs: *mut QmlpObserver) {
    if !obs.is_null() {
        drop(Box::from_raw(obs));
    }
}

/// Builds a freshly initialized model from config text (only the
/// `[model]` section matters).
#[no_mangle]
pub unsafe extern "C" fn qmlp_model_new(config: *const c_char, seed: u64, out: *mut *mut QmlpModel) -> QmlpStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = parse_config(text(config, "config")?)?;
        let inner = Model::new(&cfg.model, seed)?;
        *out = Box::into_raw(Box::new(QmlpModel { inner }));
        Ok(())
    })
}

/// Replaces parameters with those of a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn qmlp_model_load(model: *mut QmlpModel, path: *const c_char) -> QmlpStatus {
    guard(|| {
        let model = model.as_mut().ok_or_else(|| null("model"))?;
        let state = checkpoint::load(Path::new(text(path, "path")?))?;
        model.inner.load_state(&state)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qmlp_model_save(model: *const QmlpModel, path: *const c_char) -> QmlpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        checkpoint::save(Path::new(text(path, "path")?), &model.inner.state())?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qmlp_model_param_count(model: *const QmlpModel, out: *mut u64) -> QmlpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = model.inner.param_counts().total() as u64;
        Ok(())
    })
}

/// Floating-point operations of one forward pass over one image.
#[no_mangle]
pub unsafe extern "C" fn qmlp_model_flops(model: *const QmlpModel, out: *mut u64) -> QmlpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = model.inner.flops_per_sample();
        Ok(())
    })
}

/// Values per input image (`C_in·H·W`) and number of classes.
#[no_mangle]
pub unsafe extern "C" fn qmlp_model_shape(model: *const QmlpModel, input_len: *mut usize, classes: *mut usize) -> QmlpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let c = model.inner.config();
        *input_len.as_mut().ok_or_else(|| null("input_len"))? = c.in_channels * c.height * c.width;
        *classes.as_mut().ok_or_else(|| null("classes"))? = c.classes;
        Ok(())
    })
}

/// Float inference. `images` holds `batch` images, row-major
/// `[batch, C_in, H, W]`; `logits` receives `batch × classes` values and
/// `logits_len` must equal that product.
#[no_mangle]
pub unsafe extern "C" fn qmlp_model_predict(
    model: *const QmlpModel,
    images: *const f64,
    batch: usize,
    logits: *mut f64,
    logits_len: usize,
) -> QmlpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let c = model.inner.config();
        if batch == 0 {
            return Err(Fail(QmlpStatus::InvalidArgument, "batch must be at least 1".into()));
        }
        if logits_len != batch * c.classes {
            return Err(Fail(
                QmlpStatus::Dimension,
                format!("logits buffer holds {logits_len} values, need {}", batch * c.classes),
            ));
        }
        let per = c.in_channels * c.height * c.width;
        let x = slice(images, batch * per, "images")?;
        let out = slice_mut(logits, logits_len, "logits")?;
        let t = Tensor::new(vec![batch, c.in_channels, c.height, c.width], x.to_vec())?;
        let y = model.inner.predict(&t, &mut Plain)?;
        out.copy_from_slice(y.data());
        Ok(())
    })
}

/// Releases a model. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn qmlp_model_free(model: *mut QmlpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// `flops_g · weight_bits · act_bits`, in G.
#[no_mangle]
pub extern "C" fn qmlp_bops(flops_g: f64, weight_bits: u8, act_bits: u8) -> f64 {
    qmlp::pipeline::bops(flops_g, weight_bits, act_bits)
}

/// `params · weight_bits / 8e6`, in MB.
#[no_mangle]
pub extern "C" fn qmlp_model_size_mb(params: u64, weight_bits: u8) -> f64 {
    qmlp::pipeline::model_size_mb(params, weight_bits)
}
