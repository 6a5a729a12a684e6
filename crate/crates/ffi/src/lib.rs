//! C ABI over lprkit.
//!
//! Every function returns an [`LprStatus`]. On failure the message can be
//! fetched with [`lpr_last_error`] from the same thread. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lprkit::imaging::{load_png, to_network_input, CropBox};
use lprkit::lprnet::{LprNet, INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH};
use lprkit::metrics::{evaluate, levenshtein, PredictionRecord};
use lprkit::{Error, Shape4, Tensor4};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LprStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Decode = 5,
    BufferTooSmall = 6,
    Empty = 7,
    Internal = 8,
}

/// Loaded network.
pub struct LprModel {
    net: LprNet,
}

/// Accumulates prediction records and reports metrics over them.
pub struct LprEvaluator {
    records: Vec<PredictionRecord>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LprReport {
    pub accuracy: f64,
    pub mean_levenshtein: f64,
    pub tp: usize,
    pub tn1: usize,
    pub tn2: usize,
    pub n: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> LprStatus {
    match e {
        Error::Io(_) | Error::MissingPath(_) => LprStatus::Io,
        Error::Checkpoint(_) => LprStatus::Checkpoint,
        Error::Decode { .. } => LprStatus::Decode,
        _ => LprStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (LprStatus, String)>) -> LprStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LprStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LprStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (LprStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (LprStatus, String) {
    (LprStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (LprStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (LprStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Copies `s` plus a NUL terminator into `buf`. `needed` receives the
/// required size including the terminator even when the buffer is short.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), (LprStatus, String)> {
    let bytes = s.as_bytes();
    if !needed.is_null() {
        *needed = bytes.len() + 1;
    }
    if buf.is_null() {
        return Err(null("output buffer"));
    }
    if cap < bytes.len() + 1 {
        return Err((
            LprStatus::BufferTooSmall,
            format!("buffer holds {cap} bytes, {} needed", bytes.len() + 1),
        ));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Copies the calling thread's last error message into `buf` and returns
/// the size needed including the terminator. Passing a null `buf` only
/// returns the size.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lpr_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads a `.lprb` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lpr_model_load(path: *const c_char, out: *mut *mut LprModel) -> LprStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let net = LprNet::load(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(LprModel { net }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`lpr_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lpr_model_free(model: *mut LprModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes including the blank.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lpr_model_num_classes(model: *const LprModel, out: *mut usize) -> LprStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.net.charset().classes();
        Ok(())
    })
}

/// Recognizes one prepared input: `3 * 24 * 94` values, channel-major,
/// BGR order, scaled to [0, 1].
///
/// # Safety
/// `pixels` must point to `len` readable doubles and `buf` to `cap`
/// writable bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn lpr_model_recognize(
    model: *const LprModel,
    pixels: *const f64,
    len: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> LprStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let expect = INPUT_CHANNELS * INPUT_HEIGHT * INPUT_WIDTH;
        if len != expect {
            return Err((LprStatus::InvalidArgument, format!("expected {expect} values, got {len}")));
        }
        let data = std::slice::from_raw_parts(pixels, len).to_vec();
        let shape = Shape4::new(1, INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH).map_err(lib_err)?;
        let input = Tensor4::from_vec(shape, data).map_err(lib_err)?;
        let text = m.net.recognize(&input).map_err(lib_err)?.remove(0);
        write_str(&text, buf, cap, needed)
    })
}

/// Loads a PNG plate photo, crops the plate region, resizes and converts
/// it, then recognizes it.
///
/// # Safety
/// As [`lpr_model_recognize`]; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lpr_model_recognize_png(
    model: *const LprModel,
    path: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> LprStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = str_arg(path, "path")?;
        let img = load_png(Path::new(path)).map_err(lib_err)?;
        let input = to_network_input(&img, &CropBox::PLATE_ROI).map_err(lib_err)?;
        let text = m.net.recognize(&input).map_err(lib_err)?.remove(0);
        write_str(&text, buf, cap, needed)
    })
}

/// Edit distance between two UTF-8 strings, counted in characters.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lpr_levenshtein(a: *const c_char, b: *const c_char, out: *mut usize) -> LprStatus {
    guard(|| {
        let a = str_arg(a, "a")?;
        let b = str_arg(b, "b")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = levenshtein(a, b);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn lpr_evaluator_new() -> *mut LprEvaluator {
    Box::into_raw(Box::new(LprEvaluator { records: Vec::new() }))
}

/// # Safety
/// `ev` must be null or a handle from [`lpr_evaluator_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lpr_evaluator_free(ev: *mut LprEvaluator) {
    if !ev.is_null() {
        drop(Box::from_raw(ev));
    }
}

/// # Safety
/// `ev` must be a live handle; the strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lpr_evaluator_add(ev: *mut LprEvaluator, ground_truth: *const c_char, predicted: *const c_char) -> LprStatus {
    guard(|| {
        let ev = ev.as_mut().ok_or_else(|| null("evaluator"))?;
        let gt = str_arg(ground_truth, "ground_truth")?;
        let pred = str_arg(predicted, "predicted")?;
        let id = ev.records.len().to_string();
        ev.records.push(PredictionRecord::new(gt, pred, id));
        Ok(())
    })
}

/// Metrics over every record added so far. Fails with `Empty` when none
/// have been added.
///
/// # Safety
/// `ev` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lpr_evaluator_report(ev: *const LprEvaluator, out: *mut LprReport) -> LprStatus {
    guard(|| {
        let ev = ev.as_ref().ok_or_else(|| null("evaluator"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if ev.records.is_empty() {
            return Err((LprStatus::Empty, "no records added".into()));
        }
        let r = evaluate(&ev.records).map_err(lib_err)?;
        *out = LprReport {
            accuracy: r.accuracy,
            mean_levenshtein: r.mean_levenshtein,
            tp: r.tp,
            tn1: r.tn1,
            tn2: r.tn2,
            n: r.n,
        };
        Ok(())
    })
}
