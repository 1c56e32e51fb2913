//! C interface to the firedet detector.
//!
//! Models and detection lists are opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call returns
//! an [`FdStatus`]; on failure a message for the calling thread is available
//! from [`fd_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use firedet::dataset::RgbImage;
use firedet::detector::DetectorModel;
use firedet::error::Error;
use firedet::inference::{detect_image, Detection, InferenceConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    OutOfRange = 5,
    Internal = 6,
}

/// A loaded model.
pub struct FdModel {
    model: DetectorModel<f32>,
}

/// Detections from one image, in descending confidence.
pub struct FdDetections {
    items: Vec<FdDetection>,
}

/// One box in source-image pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdDetection {
    pub class_id: u32,
    pub confidence: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Post-processing thresholds.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdDetectOptions {
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> FdStatus {
    match e {
        Error::Io { .. } => FdStatus::Io,
        Error::Format { .. } | Error::Json(_) => FdStatus::Format,
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Shape(_) => {
            FdStatus::InvalidArgument
        }
        _ => FdStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), (FdStatus, String)>) -> FdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FdStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (FdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FdStatus, String) {
    (FdStatus::NullArgument, format!("`{what}` is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Interactive defaults: confidence 0.25, NMS IoU 0.45, 300 boxes.
#[no_mangle]
pub extern "C" fn fd_default_options() -> FdDetectOptions {
    let d = InferenceConfig::default();
    FdDetectOptions {
        conf_threshold: d.conf_threshold,
        nms_iou_threshold: d.nms_iou_threshold,
        max_detections: d.max_detections as u32,
    }
}

/// Loads a checkpoint (and its sidecar) from a UTF-8 path.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fd_model_load(path: *const c_char, out: *mut *mut FdModel) -> FdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (FdStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = DetectorModel::<f32>::load(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FdModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`fd_model_load`] and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fd_model_free(model: *mut FdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square input side the model was trained at, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fd_model_input_size(model: *const FdModel) -> u32 {
    model
        .as_ref()
        .map_or(0, |m| m.model.config().input_size as u32)
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fd_model_num_classes(model: *const FdModel) -> u32 {
    model
        .as_ref()
        .map_or(0, |m| m.model.config().num_classes as u32)
}

/// Detects objects in a packed RGB8 image (`width * height * 3` bytes,
/// row-major). `options` may be NULL for the defaults. `latency_s` may be
/// NULL; otherwise it receives the forward plus post-processing time.
///
/// # Safety
/// `model` must be a live handle, `rgb` must point to `width * height * 3`
/// readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_detect_rgb(
    model: *const FdModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    options: *const FdDetectOptions,
    out: *mut *mut FdDetections,
    latency_s: *mut f64,
) -> FdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let (w, h) = (width as usize, height as usize);
        let len = w
            .checked_mul(h)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| (FdStatus::InvalidArgument, "image too large".to_string()))?;
        let pixels = std::slice::from_raw_parts(rgb, len).to_vec();
        let image = RgbImage::new(w, h, pixels).map_err(lib_err)?;
        let opts = options
            .as_ref()
            .copied()
            .unwrap_or_else(|| fd_default_options());
        let cfg = InferenceConfig {
            conf_threshold: opts.conf_threshold,
            nms_iou_threshold: opts.nms_iou_threshold,
            max_detections: opts.max_detections as usize,
        };
        cfg.validate().map_err(lib_err)?;
        let (dets, secs) = detect_image(&model.model, &image, &cfg).map_err(lib_err)?;
        if let Some(l) = latency_s.as_mut() {
            *l = secs;
        }
        let items = dets.iter().map(to_c).collect();
        *out = Box::into_raw(Box::new(FdDetections { items }));
        Ok(())
    })
}

fn to_c(d: &Detection) -> FdDetection {
    FdDetection {
        class_id: d.class_id as u32,
        confidence: d.confidence,
        x1: d.bbox.x1,
        y1: d.bbox.y1,
        x2: d.bbox.x2,
        y2: d.bbox.y2,
    }
}

/// Number of detections, or 0 for NULL.
///
/// # Safety
/// `dets` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fd_detections_len(dets: *const FdDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.items.len())
}

/// Copies detection `index` into `out`.
///
/// # Safety
/// `dets` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fd_detections_get(
    dets: *const FdDetections,
    index: usize,
    out: *mut FdDetection,
) -> FdStatus {
    guard(|| {
        let d = dets.as_ref().ok_or_else(|| null("dets"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = *d.items.get(index).ok_or_else(|| {
            (
                FdStatus::OutOfRange,
                format!(
                    "index {index} out of range for {} detections",
                    d.items.len()
                ),
            )
        })?;
        Ok(())
    })
}

/// # Safety
/// `dets` must come from [`fd_detect_rgb`] and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fd_detections_free(dets: *mut FdDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}
