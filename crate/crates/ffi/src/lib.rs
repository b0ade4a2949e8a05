//! C ABI over `daiam-core`: load a checkpoint, derain images, and compute
//! PSNR, SSIM and soft masks.
//!
//! Images cross the boundary as interleaved RGB `float` buffers of
//! `height * width * 3` values in `[0, 1]`, row-major. Masks are
//! `height * width` floats. Every fallible call returns a
//! [`DaiamStatus`]; on failure [`daiam_last_error_message`] describes it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use daiam_core::checkpoint::Checkpoint;
use daiam_core::metrics::{psnr, ssim};
use daiam_core::raingen::compute_soft_mask;
use daiam_core::{Error, Image, Model};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaiamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    ImageTooSmall = 5,
    NonFinite = 6,
    Panic = 7,
    Internal = 8,
}

/// Opaque model handle.
pub struct DaiamModel {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(DaiamStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Decode { .. } => DaiamStatus::Io,
            Error::Checkpoint(_) | Error::TensorMismatch { .. } => DaiamStatus::Checkpoint,
            Error::ImageTooSmall { .. } => DaiamStatus::ImageTooSmall,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => DaiamStatus::NonFinite,
            Error::ShapeMismatch { .. } | Error::Config(_) | Error::InvalidParam { .. } | Error::Dataset { .. } => {
                DaiamStatus::InvalidArgument
            }
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DaiamStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DaiamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DaiamStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DaiamStatus::Panic
        }
    }
}

fn pixels(height: usize, width: usize, channels: usize) -> Result<usize, Failure> {
    if height == 0 || width == 0 {
        return Err(Failure(
            DaiamStatus::InvalidArgument,
            format!("empty image {height}x{width}"),
        ));
    }
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Failure(DaiamStatus::InvalidArgument, "image size overflows".into()))
}

/// # Safety
/// `data` must point to `height * width * 3` readable floats.
unsafe fn read_rgb(data: *const f32, height: usize, width: usize, what: &str) -> Result<Image, Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    let n = pixels(height, width, 3)?;
    let src = slice::from_raw_parts(data, n);
    Ok(Image::from_fn(height, width, 3, |c, y, x| src[(y * width + x) * 3 + c]))
}

fn write_rgb(img: &Image, out: &mut [f32]) {
    let (h, w, _) = img.dims();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = img.get(c, y, x);
            }
        }
    }
}

/// Load a checkpoint (training or inference) and store a new handle in
/// `*out`. Release it with [`daiam_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn daiam_model_load(path: *const c_char, out: *mut *mut DaiamModel) -> DaiamStatus {
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
            .map_err(|_| Failure(DaiamStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let model = Checkpoint::<f32>::load(Path::new(path))?.model;
        *out = Box::into_raw(Box::new(DaiamModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`daiam_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn daiam_model_free(model: *mut DaiamModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn daiam_model_param_count(model: *const DaiamModel, out: *mut usize) -> DaiamStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.model.param_count();
        Ok(())
    })
}

/// Derain one image. The result, clamped to `[0, 1]`, has the input's size.
///
/// # Safety
/// `model` must be a live handle; `input` and `output` must each hold
/// `height * width * 3` floats and may alias.
#[no_mangle]
pub unsafe extern "C" fn daiam_model_derain(
    model: *const DaiamModel,
    input: *const f32,
    height: usize,
    width: usize,
    output: *mut f32,
) -> DaiamStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let img = read_rgb(input, height, width, "input")?;
        if output.is_null() {
            return Err(null("output"));
        }
        let restored = m.model.derain(&img)?;
        write_rgb(&restored, slice::from_raw_parts_mut(output, height * width * 3));
        Ok(())
    })
}

/// PSNR in dB over RGB, inputs clamped to `[0, 1]`, capped at 100.
///
/// # Safety
/// `a` and `b` must hold `height * width * 3` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn daiam_psnr(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
) -> DaiamStatus {
    guard(|| {
        let (a, b) = (read_rgb(a, height, width, "a")?, read_rgb(b, height, width, "b")?);
        *out.as_mut().ok_or_else(|| null("out"))? = psnr(&a, &b)?;
        Ok(())
    })
}

/// SSIM on luminance with an 11x11 Gaussian window (sigma 1.5).
///
/// # Safety
/// As for [`daiam_psnr`].
#[no_mangle]
pub unsafe extern "C" fn daiam_ssim(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
) -> DaiamStatus {
    guard(|| {
        let (a, b) = (read_rgb(a, height, width, "a")?, read_rgb(b, height, width, "b")?);
        *out.as_mut().ok_or_else(|| null("out"))? = ssim(&a, &b)?;
        Ok(())
    })
}

/// Soft rain mask of `rainy` against `clean`, written as
/// `height * width` floats in `[0, 1]`.
///
/// # Safety
/// `rainy` and `clean` must hold `height * width * 3` floats; `mask` must
/// hold `height * width`.
#[no_mangle]
pub unsafe extern "C" fn daiam_soft_mask(
    rainy: *const f32,
    clean: *const f32,
    height: usize,
    width: usize,
    mask: *mut f32,
) -> DaiamStatus {
    guard(|| {
        let rainy = read_rgb(rainy, height, width, "rainy")?;
        let clean = read_rgb(clean, height, width, "clean")?;
        if mask.is_null() {
            return Err(null("mask"));
        }
        let m = compute_soft_mask(&rainy, &clean)?;
        slice::from_raw_parts_mut(mask, height * width).copy_from_slice(m.data());
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn daiam_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn daiam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
