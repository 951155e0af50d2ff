//! C ABI over the `crrn` library.
//!
//! Every fallible call returns a [`CrrnStatus`]; the message of the most
//! recent failure on the calling thread is available from
//! [`crrn_last_error_message`]. Handles are opaque and must be released with
//! their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use crrn::evaluation::infer_image;
use crrn::image_model::{load_image, save_image, ImagePlane};
use crrn::metrics::{si, ssim, SsimConfig};
use crrn::model::Crrn;
use crrn::training::Checkpoint;
use crrn::CrrnError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrrnStatus {
    Ok = 0,
    NotFound = 1,
    Format = 2,
    Io = 3,
    Dimension = 4,
    Argument = 5,
    Config = 6,
    Integrity = 7,
    Numeric = 8,
    Version = 9,
    NullPointer = 10,
    Panic = 11,
}

impl From<&CrrnError> for CrrnStatus {
    fn from(e: &CrrnError) -> Self {
        match e {
            CrrnError::NotFound(_) => CrrnStatus::NotFound,
            CrrnError::Format(_) => CrrnStatus::Format,
            CrrnError::Io { .. } => CrrnStatus::Io,
            CrrnError::Dimension(_) => CrrnStatus::Dimension,
            CrrnError::Argument(_) => CrrnStatus::Argument,
            CrrnError::Config(_) => CrrnStatus::Config,
            CrrnError::Integrity(_) => CrrnStatus::Integrity,
            CrrnError::Numeric(_) => CrrnStatus::Numeric,
            CrrnError::Version { .. } => CrrnStatus::Version,
        }
    }
}

/// Trained networks loaded from a checkpoint.
pub struct CrrnModel(Crrn);

/// Planar float image, values in [0, 1].
pub struct CrrnImage(ImagePlane);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), (CrrnStatus, String)>) -> CrrnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CrrnStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CrrnStatus::Panic
        }
    }
}

fn lift<T>(r: crrn::Result<T>) -> Result<T, (CrrnStatus, String)> {
    r.map_err(|e| (CrrnStatus::from(&e), e.to_string()))
}

fn null(what: &str) -> (CrrnStatus, String) {
    (CrrnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (CrrnStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (CrrnStatus::Argument, format!("{what} is not valid UTF-8")))
}

unsafe fn image_ref<'a>(img: *const CrrnImage, what: &str) -> Result<&'a ImagePlane, (CrrnStatus, String)> {
    img.as_ref().map(|i| &i.0).ok_or_else(|| null(what))
}

fn boxed(img: ImagePlane) -> *mut CrrnImage {
    Box::into_raw(Box::new(CrrnImage(img)))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn crrn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length, or 0 if none.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn crrn_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Load a checkpoint written by the joint training stage.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crrn_model_load(path: *const c_char, out: *mut *mut CrrnModel) -> CrrnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let model = lift(Checkpoint::load(&path).and_then(|c| c.model()))?;
        *out = Box::into_raw(Box::new(CrrnModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`crrn_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn crrn_model_free(model: *mut CrrnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image from planar (`channels x height x width`) samples; channels is 1 or 3.
///
/// # Safety
/// `data` must point to `height * width * channels` readable floats.
#[no_mangle]
pub unsafe extern "C" fn crrn_image_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f32,
    out: *mut *mut CrrnImage,
) -> CrrnStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return Err(null("data or out"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or((CrrnStatus::Dimension, "image size overflows".to_string()))?;
        let samples = std::slice::from_raw_parts(data, n).to_vec();
        *out = boxed(lift(ImagePlane::new(height, width, channels, samples))?);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crrn_image_load(path: *const c_char, out: *mut *mut CrrnImage) -> CrrnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        *out = boxed(lift(load_image(&path))?);
        Ok(())
    })
}

/// Write an 8-bit PNG.
///
/// # Safety
/// `image` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn crrn_image_save(image: *const CrrnImage, path: *const c_char) -> CrrnStatus {
    guard(|| {
        let img = image_ref(image, "image")?;
        let path = path_arg(path, "path")?;
        lift(save_image(img, &path))
    })
}

/// # Safety
/// `image` must be a live handle; the out pointers must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn crrn_image_dims(
    image: *const CrrnImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> CrrnStatus {
    guard(|| {
        let img = image_ref(image, "image")?;
        for (p, v) in [(height, img.height()), (width, img.width()), (channels, img.channels())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Planar samples, valid until the handle is freed. NULL for a NULL handle.
///
/// # Safety
/// `image` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn crrn_image_data(image: *const CrrnImage) -> *const f32 {
    image.as_ref().map_or(ptr::null(), |i| i.0.data().as_ptr())
}

/// # Safety
/// `image` must be NULL or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn crrn_image_free(image: *mut CrrnImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Separate `mixture` into background, reflection and a one-channel
/// background gradient, each at the input resolution. Without
/// `auto_resize` the input sides must be multiples of 32.
///
/// # Safety
/// `model` and `mixture` must be live handles; the out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn crrn_model_predict(
    model: *const CrrnModel,
    mixture: *const CrrnImage,
    auto_resize: bool,
    background: *mut *mut CrrnImage,
    reflection: *mut *mut CrrnImage,
    gradient: *mut *mut CrrnImage,
) -> CrrnStatus {
    guard(|| {
        let model = model.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))?;
        let img = image_ref(mixture, "mixture")?;
        if background.is_null() || reflection.is_null() || gradient.is_null() {
            return Err(null("output pointer"));
        }
        let (b, r, g) = lift(infer_image(model, img, auto_resize))?;
        let g = lift(ImagePlane::new(g.height(), g.width(), 1, g.data().to_vec()))?;
        *background = boxed(b);
        *reflection = boxed(r);
        *gradient = boxed(g);
        Ok(())
    })
}

unsafe fn similarity(
    a: *const CrrnImage,
    b: *const CrrnImage,
    out: *mut f64,
    f: fn(&ImagePlane, &ImagePlane, &SsimConfig) -> crrn::Result<crrn::metrics::SimilarityMap>,
) -> CrrnStatus {
    guard(|| {
        let (a, b) = (image_ref(a, "a")?, image_ref(b, "b")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lift(f(a, b, &SsimConfig::default()))?.value;
        Ok(())
    })
}

/// Mean SSIM with the default window.
///
/// # Safety
/// `a`, `b` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crrn_ssim(a: *const CrrnImage, b: *const CrrnImage, out: *mut f64) -> CrrnStatus {
    similarity(a, b, out, ssim)
}

/// Mean structure index (SSIM without the luminance term).
///
/// # Safety
/// `a`, `b` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crrn_si(a: *const CrrnImage, b: *const CrrnImage, out: *mut f64) -> CrrnStatus {
    similarity(a, b, out, si)
}
