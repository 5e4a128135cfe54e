//! C ABI for the separation and metric cores.
//!
//! Bindings follow the usual opaque-handle pattern: load a separator from a
//! checkpoint, run queries against caller-provided sample buffers, free the
//! handle. Every function returns a [`TqsedStatus`]; the per-thread message
//! for the most recent failure is available through
//! [`tqsed_last_error_message`]. The generated header lands in
//! `include/tqsed.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tqsed::audio::Waveform;
use tqsed::checkpoint;
use tqsed::separation::{LookupTextEncoder, SeparationModel, TextQuery};

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

/// Status codes returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TqsedStatus {
    Ok = 0,
    /// Null pointer or malformed argument.
    InvalidArgument = 1,
    /// Input violated a precondition (length, sample rate, unknown query).
    InvalidInput = 2,
    /// Checkpoint missing, corrupt or of an unknown format tag.
    Checkpoint = 3,
    /// Internal failure; message has details.
    Internal = 4,
}

/// Opaque separator: a frozen model plus its text encoder.
pub struct TqsedSeparator {
    model: SeparationModel,
    encoder: LookupTextEncoder,
}

fn status_of(err: &tqsed::Error) -> TqsedStatus {
    match err.kind() {
        "invalid_input" | "shape" | "undefined_metric" => TqsedStatus::InvalidInput,
        "checkpoint" => TqsedStatus::Checkpoint,
        _ => TqsedStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> TqsedStatus) -> TqsedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic".into());
            TqsedStatus::Internal
        }
    }
}

/// Copies the most recent error message for this thread into `buf`
/// (truncated, always NUL-terminated). Returns the full message length.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null (in which
/// case only the length is returned).
#[no_mangle]
pub unsafe extern "C" fn tqsed_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tqsed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a separation checkpoint. On success writes a handle to `out`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be a valid
/// pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn tqsed_separator_load(
    path: *const c_char,
    out: *mut *mut TqsedSeparator,
) -> TqsedStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            set_error("null pointer argument".into());
            return TqsedStatus::InvalidArgument;
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            set_error("path is not valid UTF-8".into());
            return TqsedStatus::InvalidArgument;
        };
        match checkpoint::load_separation(std::path::Path::new(path)) {
            Ok((model, encoder)) => {
                *out = Box::into_raw(Box::new(TqsedSeparator { model, encoder }));
                TqsedStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Frees a handle returned by [`tqsed_separator_load`]. Null is a no-op.
///
/// # Safety
/// `handle` must originate from `tqsed_separator_load` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn tqsed_separator_free(handle: *mut TqsedSeparator) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Sample rate the loaded separator expects.
///
/// # Safety
/// `handle` must be a live separator handle.
#[no_mangle]
pub unsafe extern "C" fn tqsed_separator_sample_rate(handle: *const TqsedSeparator) -> u32 {
    if handle.is_null() {
        return 0;
    }
    (*handle).model.config.sample_rate
}

/// Separates the track described by `query` from `samples` (mono, f64, at
/// the model sample rate) into the caller-allocated `out` buffer of the
/// same length. Length is preserved exactly.
///
/// # Safety
/// `samples` and `out` must each point to `len` readable/writable f64s;
/// `query` must be a NUL-terminated UTF-8 string; `handle` must be live.
#[no_mangle]
pub unsafe extern "C" fn tqsed_separate(
    handle: *const TqsedSeparator,
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    query: *const c_char,
    out: *mut f64,
) -> TqsedStatus {
    guard(|| {
        if handle.is_null() || samples.is_null() || out.is_null() || query.is_null() {
            set_error("null pointer argument".into());
            return TqsedStatus::InvalidArgument;
        }
        let sep = &*handle;
        let Ok(query) = CStr::from_ptr(query).to_str() else {
            set_error("query is not valid UTF-8".into());
            return TqsedStatus::InvalidArgument;
        };
        let input = std::slice::from_raw_parts(samples, len);
        let result = (|| -> tqsed::Result<Vec<f64>> {
            let wave = Waveform::new(input.to_vec(), sample_rate)?;
            let q = TextQuery::new(query)?;
            Ok(sep
                .model
                .separate(&wave, &q, &sep.encoder)?
                .into_samples())
        })();
        match result {
            Ok(separated) => {
                debug_assert_eq!(separated.len(), len);
                ptr::copy_nonoverlapping(separated.as_ptr(), out, len);
                TqsedStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Number of queries the separator's encoder knows; labels are retrieved
/// with [`tqsed_separator_query_label`].
///
/// # Safety
/// `handle` must be a live separator handle.
#[no_mangle]
pub unsafe extern "C" fn tqsed_separator_query_count(handle: *const TqsedSeparator) -> usize {
    if handle.is_null() {
        return 0;
    }
    (*handle).encoder.labels().len()
}

/// Copies the idx-th known query label into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full label length, or 0 when out of
/// range.
///
/// # Safety
/// `handle` must be live; `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tqsed_separator_query_label(
    handle: *const TqsedSeparator,
    idx: usize,
    buf: *mut c_char,
    cap: usize,
) -> usize {
    if handle.is_null() {
        return 0;
    }
    let labels = (*handle).encoder.labels();
    let Some(label) = labels.get(idx) else {
        return 0;
    };
    let bytes = label.as_bytes();
    if !buf.is_null() && cap > 0 {
        let n = bytes.len().min(cap - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
    }
    bytes.len()
}

unsafe fn metric_pair<'a>(
    est: *const f64,
    reference: *const f64,
    len: usize,
) -> Option<(&'a [f64], &'a [f64])> {
    if est.is_null() || reference.is_null() || len == 0 {
        return None;
    }
    Some((
        std::slice::from_raw_parts(est, len),
        std::slice::from_raw_parts(reference, len),
    ))
}

fn run_metric(f: impl FnOnce() -> tqsed::Result<f64>, out: *mut f64) -> TqsedStatus {
    match f() {
        Ok(v) => {
            unsafe { *out = v };
            TqsedStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Signal-to-distortion ratio in dB (clamped to +-100).
///
/// # Safety
/// `est` and `reference` must point to `len` readable f64s; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tqsed_sdr(
    est: *const f64,
    reference: *const f64,
    len: usize,
    out: *mut f64,
) -> TqsedStatus {
    guard(|| {
        let Some((e, r)) = metric_pair(est, reference, len) else {
            set_error("null or empty buffers".into());
            return TqsedStatus::InvalidArgument;
        };
        if out.is_null() {
            set_error("null output pointer".into());
            return TqsedStatus::InvalidArgument;
        }
        run_metric(
            || {
                let ew = Waveform::new(e.to_vec(), 1)?;
                let rw = Waveform::new(r.to_vec(), 1)?;
                tqsed::metrics::sdr(&ew, &rw)
            },
            out,
        )
    })
}

/// Scale-invariant SDR in dB (clamped to +-100).
///
/// # Safety
/// As [`tqsed_sdr`].
#[no_mangle]
pub unsafe extern "C" fn tqsed_si_sdr(
    est: *const f64,
    reference: *const f64,
    len: usize,
    out: *mut f64,
) -> TqsedStatus {
    guard(|| {
        let Some((e, r)) = metric_pair(est, reference, len) else {
            set_error("null or empty buffers".into());
            return TqsedStatus::InvalidArgument;
        };
        if out.is_null() {
            set_error("null output pointer".into());
            return TqsedStatus::InvalidArgument;
        }
        run_metric(
            || {
                let ew = Waveform::new(e.to_vec(), 1)?;
                let rw = Waveform::new(r.to_vec(), 1)?;
                tqsed::metrics::si_sdr(&ew, &rw)
            },
            out,
        )
    })
}

/// SDR improvement of `est` over `mixture`, both against `reference`.
///
/// # Safety
/// All three buffers must point to `len` readable f64s; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tqsed_sdri(
    est: *const f64,
    reference: *const f64,
    mixture: *const f64,
    len: usize,
    out: *mut f64,
) -> TqsedStatus {
    guard(|| {
        let Some((e, r)) = metric_pair(est, reference, len) else {
            set_error("null or empty buffers".into());
            return TqsedStatus::InvalidArgument;
        };
        if mixture.is_null() || out.is_null() {
            set_error("null pointer argument".into());
            return TqsedStatus::InvalidArgument;
        }
        let m = std::slice::from_raw_parts(mixture, len);
        run_metric(
            || {
                let ew = Waveform::new(e.to_vec(), 1)?;
                let rw = Waveform::new(r.to_vec(), 1)?;
                let mw = Waveform::new(m.to_vec(), 1)?;
                tqsed::metrics::sdri(&ew, &rw, &mw)
            },
            out,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    #[test]
    fn metrics_work_through_the_c_surface() {
        let r = [0.5, -0.25, 0.1, 0.9, -0.3];
        let e: Vec<f64> = r.iter().map(|v| 0.5 * v).collect();
        let mut out = 0.0;
        let status = unsafe { tqsed_sdr(e.as_ptr(), r.as_ptr(), r.len(), &mut out) };
        assert_eq!(status, TqsedStatus::Ok);
        assert!((out - 6.0206).abs() < 1e-3);

        let status = unsafe { tqsed_si_sdr(e.as_ptr(), r.as_ptr(), r.len(), &mut out) };
        assert_eq!(status, TqsedStatus::Ok);
        assert_eq!(out, 100.0); // a scaled copy projects perfectly

        let status =
            unsafe { tqsed_sdri(r.as_ptr(), r.as_ptr(), e.as_ptr(), r.len(), &mut out) };
        assert_eq!(status, TqsedStatus::Ok);
        assert!(out > 0.0);
    }

    #[test]
    fn null_arguments_are_rejected_with_messages() {
        let mut out = 0.0;
        let status = unsafe { tqsed_sdr(ptr::null(), ptr::null(), 0, &mut out) };
        assert_eq!(status, TqsedStatus::InvalidArgument);
        let mut buf = [0 as c_char; 128];
        let n = unsafe { tqsed_last_error_message(buf.as_mut_ptr(), buf.len()) };
        assert!(n > 0);
    }

    #[test]
    fn zero_reference_maps_to_invalid_input() {
        let z = [0.0; 4];
        let e = [0.1; 4];
        let mut out = 0.0;
        let status = unsafe { tqsed_sdr(e.as_ptr(), z.as_ptr(), 4, &mut out) };
        assert_eq!(status, TqsedStatus::InvalidInput);
    }

    #[test]
    fn separator_round_trip_through_the_c_surface() {
        use tqsed::audio::StftParams;
        use tqsed::separation::{DprnnConfig, MaskKind, SeparationConfig};

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("sep.tqck");
        let cfg = SeparationConfig {
            sample_rate: 16_000,
            stft: StftParams::new(0.016, 0.008),
            widths: vec![2, 4],
            dprnn: Some(DprnnConfig::new(3)),
            embedding_dim: 4,
            mask_kind: MaskKind::MagnitudeMask,
        };
        let model = SeparationModel::new(cfg, 3).unwrap();
        let encoder =
            LookupTextEncoder::new(&["hum".to_string(), "hiss".to_string()], 4, 4).unwrap();
        checkpoint::save_separation(&ckpt, &model, &encoder).unwrap();

        let path = CString::new(ckpt.to_str().unwrap()).unwrap();
        let mut handle: *mut TqsedSeparator = ptr::null_mut();
        let status = unsafe { tqsed_separator_load(path.as_ptr(), &mut handle) };
        assert_eq!(status, TqsedStatus::Ok);
        assert_eq!(unsafe { tqsed_separator_sample_rate(handle) }, 16_000);
        assert_eq!(unsafe { tqsed_separator_query_count(handle) }, 2);

        let mut name = [0 as c_char; 32];
        let n =
            unsafe { tqsed_separator_query_label(handle, 0, name.as_mut_ptr(), name.len()) };
        assert!(n > 0);

        let samples: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let mut out = vec![0.0_f64; samples.len()];
        let query = CString::new("hum").unwrap();
        let status = unsafe {
            tqsed_separate(
                handle,
                samples.as_ptr(),
                samples.len(),
                16_000,
                query.as_ptr(),
                out.as_mut_ptr(),
            )
        };
        assert_eq!(status, TqsedStatus::Ok);
        assert!(out.iter().any(|&v| v != 0.0));

        // Unknown query fails with a message naming the known labels.
        let bad = CString::new("spaceship").unwrap();
        let status = unsafe {
            tqsed_separate(
                handle,
                samples.as_ptr(),
                samples.len(),
                16_000,
                bad.as_ptr(),
                out.as_mut_ptr(),
            )
        };
        assert_eq!(status, TqsedStatus::InvalidInput);
        let mut buf = [0 as c_char; 256];
        unsafe { tqsed_last_error_message(buf.as_mut_ptr(), buf.len()) };

        // Wrong sample rate is rejected.
        let status = unsafe {
            tqsed_separate(
                handle,
                samples.as_ptr(),
                samples.len(),
                32_000,
                query.as_ptr(),
                out.as_mut_ptr(),
            )
        };
        assert_eq!(status, TqsedStatus::InvalidInput);

        unsafe { tqsed_separator_free(handle) };
    }
}
