//! C ABI over trained segmentation checkpoints.
//!
//! Every entry point returns a [`PattunetStatus`]; on failure the message is
//! kept per thread and read with [`pattunet_last_error`]. Handles are opaque
//! and released with [`pattunet_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use prior_attunet::data::{preprocess_image, resize_nearest};
use prior_attunet::net::SegModel;
use prior_attunet::runtime::{Checkpoint, LoadedModel};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PattunetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Model = 5,
    Panic = 6,
}

/// A loaded network and its frozen prior.
pub struct PattunetModel {
    inner: LoadedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(err: &prior_attunet::Error) -> PattunetStatus {
    use prior_attunet::Error as E;
    match err {
        E::Io { .. } | E::Image { .. } => PattunetStatus::Io,
        E::Checkpoint(_) => PattunetStatus::Checkpoint,
        _ => PattunetStatus::Model,
    }
}

/// Runs `f`, recording its error or panic.
fn guarded(f: impl FnOnce() -> Result<(), (PattunetStatus, String)>) -> PattunetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PattunetStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PattunetStatus::Panic
        }
    }
}

fn lib_err(e: prior_attunet::Error) -> (PattunetStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PattunetStatus, String) {
    (PattunetStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pattunet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn pattunet_status_name(status: PattunetStatus) -> *const c_char {
    let s: &'static CStr = match status {
        PattunetStatus::Ok => c"ok",
        PattunetStatus::NullPointer => c"null pointer",
        PattunetStatus::InvalidArgument => c"invalid argument",
        PattunetStatus::Io => c"i/o error",
        PattunetStatus::Checkpoint => c"checkpoint error",
        PattunetStatus::Model => c"model error",
        PattunetStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Loads a segmentation checkpoint written by `prior-attunet train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
/// On success `*out` owns a handle to release with [`pattunet_model_free`].
#[no_mangle]
pub unsafe extern "C" fn pattunet_model_load(path: *const c_char, out: *mut *mut PattunetModel) -> PattunetStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null; the caller provides writable storage.
        unsafe { *out = std::ptr::null_mut() };
        if path.is_null() {
            return Err(null("path"));
        }
        // SAFETY: the caller guarantees a NUL-terminated string.
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| (PattunetStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(lib_err)?;
        let inner = LoadedModel::from_checkpoint(&ckpt).map_err(lib_err)?;
        // SAFETY: as above.
        unsafe { *out = Box::into_raw(Box::new(PattunetModel { inner })) };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`pattunet_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pattunet_model_free(model: *mut PattunetModel) {
    if !model.is_null() {
        // SAFETY: the caller passes ownership of a handle from `pattunet_model_load`.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Network input height and width, the size images are resampled to.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` writable pointers.
#[no_mangle]
pub unsafe extern "C" fn pattunet_model_input_size(model: *const PattunetModel, height: *mut u32, width: *mut u32) -> PattunetStatus {
    guarded(|| {
        // SAFETY: the caller guarantees a live handle or null.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if height.is_null() || width.is_null() {
            return Err(null("height or width"));
        }
        let [h, w] = m.inner.run.model.input_size;
        // SAFETY: checked non-null.
        unsafe {
            *height = h as u32;
            *width = w as u32;
        }
        Ok(())
    })
}

/// Number of trainable parameters in the segmentation network.
///
/// # Safety
/// `model` must be a live handle; `count` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pattunet_model_param_count(model: *const PattunetModel, count: *mut u64) -> PattunetStatus {
    guarded(|| {
        // SAFETY: the caller guarantees a live handle or null.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if count.is_null() {
            return Err(null("count"));
        }
        // SAFETY: checked non-null.
        unsafe { *count = SegModel::count_params(&m.inner.store) as u64 };
        Ok(())
    })
}

/// Predicts a class mask for one 8-bit grayscale slice.
///
/// `pixels` holds `height * width` row-major intensities. The mask is
/// written to `mask_out` at the same resolution, one class id per pixel
/// (0 background, 1 IRF, 2 SRF, 3 PED).
///
/// # Safety
/// `model` must be a live handle not used concurrently; `pixels` must hold
/// `height * width` readable bytes and `mask_out` `mask_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pattunet_model_predict(
    model: *mut PattunetModel,
    pixels: *const u8,
    height: u32,
    width: u32,
    mask_out: *mut u8,
    mask_len: usize,
) -> PattunetStatus {
    guarded(|| {
        // SAFETY: the caller guarantees a live, unshared handle or null.
        let m = unsafe { model.as_mut() }.ok_or_else(|| null("model"))?;
        if pixels.is_null() || mask_out.is_null() {
            return Err(null("pixels or mask_out"));
        }
        let n = (height as usize).checked_mul(width as usize).filter(|&n| n > 0);
        let n = n.ok_or_else(|| (PattunetStatus::InvalidArgument, format!("image size {height}x{width} is empty")))?;
        if mask_len < n {
            return Err((PattunetStatus::InvalidArgument, format!("mask_out holds {mask_len} bytes, need {n}")));
        }
        // SAFETY: the caller guarantees `n` readable bytes.
        let src = unsafe { std::slice::from_raw_parts(pixels, n) }.to_vec();
        let img = image::GrayImage::from_raw(width, height, src).ok_or_else(|| (PattunetStatus::InvalidArgument, "pixel buffer size".to_string()))?;
        let [ih, iw] = m.inner.run.model.input_size;
        let x = preprocess_image(&img, (ih, iw)).map_err(lib_err)?;
        let mask = m.inner.predict(&x).map_err(lib_err)?;
        let small = image::GrayImage::from_raw(iw as u32, ih as u32, mask.item(0).to_vec()).ok_or_else(|| (PattunetStatus::Model, "mask size".to_string()))?;
        let full = resize_nearest(&small, (height as usize, width as usize));
        // SAFETY: the caller guarantees `mask_len >= n` writable bytes.
        unsafe { std::ptr::copy_nonoverlapping(full.as_raw().as_ptr(), mask_out, n) };
        Ok(())
    })
}
