//! C interface to a trained generator.
//!
//! Images cross the boundary as interleaved 8-bit RGB, row-major, `3*w*h`
//! bytes. Every function returns a [`DraganStatus`]; on failure the message
//! is available from [`dragan_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use dragan::checkpoint::Checkpoint;
use dragan::eval::{background_psnr, generate_one, Psnr};
use dragan::models::Generator;
use dragan::synthdata::{render_pictogram, rgb8_to_tensor, tensor_to_rgb8, ToySignSpec};
use dragan::training::Circle;
use dragan::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DraganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Checkpoint = 5,
    Internal = 6,
}

/// Opaque generator loaded from a checkpoint.
pub struct DraganGenerator {
    inner: Generator<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> DraganStatus {
    match e {
        Error::Io { .. } => DraganStatus::Io,
        Error::ImageFormat { .. } | Error::Manifest { .. } => DraganStatus::Format,
        Error::Checkpoint { .. } => DraganStatus::Checkpoint,
        Error::ShapeMismatch { .. } | Error::InvalidArgument { .. } | Error::Config(_) => DraganStatus::InvalidArgument,
        _ => DraganStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (DraganStatus, String)>) -> DraganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DraganStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DraganStatus::Internal
        }
    }
}

fn lift(e: Error) -> (DraganStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DraganStatus, String) {
    (DraganStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (DraganStatus, String) {
    (DraganStatus::InvalidArgument, msg)
}

unsafe fn rgb_slice<'a>(p: *const u8, width: usize, height: usize, what: &str) -> Result<&'a [u8], (DraganStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, 3 * width * height))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn dragan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads the generator from a checkpoint file. Release it with
/// [`dragan_generator_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dragan_generator_load(path: *const c_char, out: *mut *mut DraganGenerator) -> DraganStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(DraganGenerator {
            inner: ck.models.generator,
        }));
        Ok(())
    })
}

/// # Safety
/// `generator` must come from [`dragan_generator_load`] and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dragan_generator_free(generator: *mut DraganGenerator) {
    if !generator.is_null() {
        drop(Box::from_raw(generator));
    }
}

/// Side length the generator expects for scenes and pictograms.
///
/// # Safety
/// `generator` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dragan_generator_resolution(generator: *const DraganGenerator, out: *mut usize) -> DraganStatus {
    guard(|| {
        let g = generator.as_ref().ok_or_else(|| null("generator"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = g.inner.config().resolution;
        Ok(())
    })
}

/// Translates `scene` to the class shown by `pictogram`. Both inputs and
/// `out` are `size x size` RGB images, `size` the generator resolution.
///
/// # Safety
/// Buffers must hold `3*size*size` bytes; `generator` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dragan_generate(
    generator: *const DraganGenerator,
    scene: *const u8,
    pictogram: *const u8,
    size: usize,
    out: *mut u8,
) -> DraganStatus {
    guard(|| {
        let g = generator.as_ref().ok_or_else(|| null("generator"))?;
        let res = g.inner.config().resolution;
        if size != res {
            return Err(invalid(format!("size {size}, the generator expects {res}")));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let x = rgb8_to_tensor(rgb_slice(scene, size, size, "scene")?, size, size).map_err(lift)?;
        let p = rgb8_to_tensor(rgb_slice(pictogram, size, size, "pictogram")?, size, size).map_err(lift)?;
        let y = generate_one(&g.inner, &x, &p).map_err(lift)?;
        let bytes = tensor_to_rgb8(&y).map_err(lift)?;
        slice::from_raw_parts_mut(out, bytes.len()).copy_from_slice(&bytes);
        Ok(())
    })
}

/// Renders the frontal pictogram of `class_id` into a `size x size` image.
///
/// # Safety
/// `out` must hold `3*size*size` bytes.
#[no_mangle]
pub unsafe extern "C" fn dragan_render_pictogram(class_id: u32, size: usize, out: *mut u8) -> DraganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if size == 0 {
            return Err(invalid("size must be positive".into()));
        }
        let spec = ToySignSpec::from_class_id(class_id).map_err(lift)?;
        let img = render_pictogram(&spec, size).map_err(lift)?;
        let bytes = tensor_to_rgb8(&img).map_err(lift)?;
        slice::from_raw_parts_mut(out, bytes.len()).copy_from_slice(&bytes);
        Ok(())
    })
}

/// PSNR over pixels strictly outside the circle `(cx, cy, r)`. When the two
/// images agree there, `*identical` is set to 1 and `*psnr_db` is untouched.
///
/// # Safety
/// `a` and `b` must hold `3*width*height` bytes; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dragan_background_psnr(
    a: *const u8,
    b: *const u8,
    width: usize,
    height: usize,
    cx: f64,
    cy: f64,
    r: f64,
    psnr_db: *mut f64,
    identical: *mut i32,
) -> DraganStatus {
    guard(|| {
        if psnr_db.is_null() || identical.is_null() {
            return Err(null("output pointer"));
        }
        let x = rgb8_to_tensor::<f64>(rgb_slice(a, width, height, "a")?, height, width).map_err(lift)?;
        let y = rgb8_to_tensor::<f64>(rgb_slice(b, width, height, "b")?, height, width).map_err(lift)?;
        match background_psnr(&x, &y, Circle { cx, cy, r }).map_err(lift)? {
            Psnr::Identical => *identical = 1,
            Psnr::Db(v) => {
                *identical = 0;
                *psnr_db = v;
            }
        }
        Ok(())
    })
}
