//! C ABI over the `avemo` core.
//!
//! Every fallible function returns an [`AvemoStatus`]; on failure the
//! message is kept per thread and read back with [`avemo_last_error`].
//! Models cross the boundary as opaque [`AvemoModel`] handles that the
//! caller releases with [`avemo_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use avemo::audio::{melspectrogram, MelConfig, Waveform};
use avemo::geometry::{compute_agent_bbox, mask_agent, BBox, ExpansionConfig, Image, KeypointSet};
use avemo::metrics::{ccc, total_expr, total_va};
use avemo::net::{load_checkpoint, SeqModel};
use avemo::{Error, Task};
use ndarray::ArrayView2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvemoStatus {
    Ok = 0,
    NullPointer = 1,
    /// Shapes, ranges or bounds outside a function's contract.
    InvalidArgument = 2,
    Config = 3,
    /// Malformed or insufficient data (short signal, bad checkpoint, ...).
    Data = 4,
    Io = 5,
    /// The output buffer is too small; the required size was still written.
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvemoTask {
    Expr = 0,
    Va = 1,
}

/// Half-open pixel box: rows `top..bottom`, columns `left..right`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AvemoBBox {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvemoExpansion {
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub conf_threshold: f64,
}

/// A loaded sequence model.
pub struct AvemoModel {
    inner: SeqModel,
}

struct Failure(AvemoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Contract(_) => AvemoStatus::InvalidArgument,
            Error::Config(_) => AvemoStatus::Config,
            Error::Io { .. } => AvemoStatus::Io,
            _ => AvemoStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AvemoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AvemoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            AvemoStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(AvemoStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice_in<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for a write of `T`.
unsafe fn write_out<T>(ptr: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(value);
    Ok(())
}

/// Copies `values` into `out` (capacity `out_len`), or reports that it does not fit.
///
/// # Safety
/// `out` must be null or valid for `out_len` writes.
unsafe fn fill(values: impl ExactSizeIterator<Item = f64>, out: *mut f64, out_len: usize) -> Result<(), Failure> {
    let need = values.len();
    if out_len < need {
        return Err(Failure(
            AvemoStatus::BufferTooSmall,
            format!("output buffer holds {out_len} values, need {need}"),
        ));
    }
    if need > 0 && out.is_null() {
        return Err(null("out"));
    }
    for (i, v) in values.enumerate() {
        out.add(i).write(v);
    }
    Ok(())
}

/// Message for the last failure on this thread, or NULL if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn avemo_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn avemo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Concordance correlation coefficient of two length-`n` series.
///
/// # Safety
/// `x` and `y` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avemo_ccc(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> AvemoStatus {
    guard(|| {
        let x = slice_in(x, n, "x")?;
        let y = slice_in(y, n, "y")?;
        let v = ccc(x, y)?;
        write_out(out, v, "out")
    })
}

#[no_mangle]
pub extern "C" fn avemo_total_expr(macro_f1: f64, accuracy: f64) -> f64 {
    total_expr(macro_f1, accuracy)
}

#[no_mangle]
pub extern "C" fn avemo_total_va(ccc_valence: f64, ccc_arousal: f64) -> f64 {
    total_va(ccc_valence, ccc_arousal)
}

#[no_mangle]
pub extern "C" fn avemo_expansion_default() -> AvemoExpansion {
    let d = ExpansionConfig::default();
    AvemoExpansion {
        lambda_x: d.lambda_x,
        lambda_y: d.lambda_y,
        conf_threshold: d.conf_threshold,
    }
}

/// Agent box from 75 BODY25 values (x, y, confidence per joint) in an
/// image of `height x width`. `cfg` may be NULL for the defaults.
/// `*present` is 0 when no joint passes the confidence threshold, in
/// which case `*out` is left untouched.
///
/// # Safety
/// `keypoints` must point to `n_values` doubles; `cfg` must be NULL or
/// valid; `out` and `present` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avemo_agent_bbox(
    keypoints: *const f64,
    n_values: usize,
    height: usize,
    width: usize,
    cfg: *const AvemoExpansion,
    out: *mut AvemoBBox,
    present: *mut i32,
) -> AvemoStatus {
    guard(|| {
        let values = slice_in(keypoints, n_values, "keypoints")?;
        let cfg = match cfg.as_ref() {
            Some(c) => ExpansionConfig {
                lambda_x: c.lambda_x,
                lambda_y: c.lambda_y,
                conf_threshold: c.conf_threshold,
            },
            None => ExpansionConfig::default(),
        };
        cfg.validate()?;
        let set = KeypointSet::from_flat(values, 0)?;
        match compute_agent_bbox(&set, height, width, &cfg)? {
            Some(b) => {
                write_out(
                    out,
                    AvemoBBox {
                        top: b.top,
                        bottom: b.bottom,
                        left: b.left,
                        right: b.right,
                    },
                    "out",
                )?;
                write_out(present, 1, "present")
            }
            None => write_out(present, 0, "present"),
        }
    })
}

/// Zeroes the agent box in an interleaved 8-bit image, in place.
/// A NULL `bbox` (no agent) leaves the image unchanged.
///
/// # Safety
/// `pixels` must point to `height * width * channels` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn avemo_mask_agent(
    pixels: *mut u8,
    height: usize,
    width: usize,
    channels: usize,
    bbox: *const AvemoBBox,
) -> AvemoStatus {
    guard(|| {
        let len = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Failure(AvemoStatus::InvalidArgument, "image size overflows".into()))?;
        if len > 0 && pixels.is_null() {
            return Err(null("pixels"));
        }
        let buf: &mut [u8] = if len == 0 { &mut [] } else { std::slice::from_raw_parts_mut(pixels, len) };
        let img = Image::new(height, width, channels, buf.to_vec())?;
        let b = bbox.as_ref().map(|b| BBox {
            top: b.top,
            bottom: b.bottom,
            left: b.left,
            right: b.right,
        });
        let masked = mask_agent(&img, b.as_ref())?;
        buf.copy_from_slice(masked.pixels());
        Ok(())
    })
}

/// Log-mel spectrogram with the default configuration, row-major
/// `frames x n_mels` into `out`. Input at another rate is resampled first.
/// Call with `out_len == 0` to learn the shape; `*frames` and `*n_mels`
/// are written whenever the signal is long enough.
///
/// # Safety
/// `samples` must point to `n_samples` doubles; `out` must be NULL or
/// valid for `out_len` doubles; `frames` and `n_mels` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avemo_melspectrogram(
    samples: *const f64,
    n_samples: usize,
    sample_rate: u32,
    out: *mut f64,
    out_len: usize,
    frames: *mut usize,
    n_mels: *mut usize,
) -> AvemoStatus {
    guard(|| {
        let samples = slice_in(samples, n_samples, "samples")?;
        let cfg = MelConfig::default();
        let mut wav = Waveform::new(samples.to_vec(), sample_rate)?;
        if sample_rate != cfg.sample_rate {
            wav = wav.resample(cfg.sample_rate)?;
        }
        let mel = melspectrogram(&wav, &cfg)?;
        write_out(frames, mel.n_frames(), "frames")?;
        write_out(n_mels, mel.n_mels(), "n_mels")?;
        fill(mel.values.iter().copied(), out, out_len)
    })
}

/// Loads a checkpoint. On success `*out` owns a handle for
/// [`avemo_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avemo_model_load(path: *const c_char, out: *mut *mut AvemoModel) -> AvemoStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(AvemoStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let model = load_checkpoint(Path::new(path))?;
        out.write(Box::into_raw(Box::new(AvemoModel { inner: model })));
        Ok(())
    })
}

/// Releases a handle from [`avemo_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn avemo_model_free(model: *mut AvemoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn avemo_model_task(model: *const AvemoModel) -> AvemoTask {
    match (*model).inner.spec.task {
        Task::Expr => AvemoTask::Expr,
        Task::Va => AvemoTask::Va,
    }
}

/// Feature width the model expects.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn avemo_model_input_dim(model: *const AvemoModel) -> usize {
    (*model).inner.spec.input_dim
}

/// Values per frame produced by [`avemo_model_predict`]: 7 class
/// probabilities for expression, (valence, arousal) for VA.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn avemo_model_output_dim(model: *const AvemoModel) -> usize {
    (*model).inner.spec.n_out()
}

/// Runs the model over one sequence of `frames x dim` row-major features
/// and writes `frames x output_dim` values to `out`.
///
/// # Safety
/// `model` must be a live handle; `features` must point to
/// `frames * dim` doubles; `out` must be valid for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn avemo_model_predict(
    model: *const AvemoModel,
    features: *const f64,
    frames: usize,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> AvemoStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let len = frames
            .checked_mul(dim)
            .ok_or_else(|| Failure(AvemoStatus::InvalidArgument, "feature size overflows".into()))?;
        let xs = slice_in(features, len, "features")?;
        let xs = ArrayView2::from_shape((frames, dim), xs).expect("length checked");
        let ys = match model.spec.task {
            Task::Expr => model.predict_proba(xs)?,
            Task::Va => model.predict(xs)?,
        };
        fill(ys.iter().copied(), out, out_len)
    })
}
