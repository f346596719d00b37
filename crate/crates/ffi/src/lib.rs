//! C interface to the `dytox` library.
//!
//! Models are opaque handles created by `dytox_model_new` or
//! `dytox_model_load` and released with `dytox_model_free`. Every fallible
//! call returns a [`DytoxStatus`]; on failure the message is available from
//! `dytox_last_error_message` on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dytox::experiment::{load_checkpoint, save_checkpoint};
use dytox::model::{DyToxModel as Model, ModelConfig, ModelOptions};
use dytox::tensor::Tensor;
use dytox::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DytoxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    Config = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct DytoxModel {
    model: Model<f32>,
    rng: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> DytoxStatus {
    match e {
        Error::Shape { .. } => DytoxStatus::Shape,
        Error::NonFinite { .. } | Error::NonScalarLoss(_) => DytoxStatus::Numeric,
        Error::InvalidArgument(_) | Error::Data(_) => DytoxStatus::InvalidArgument,
        Error::Config { .. } | Error::Json(_) => DytoxStatus::Config,
        Error::Format(_) => DytoxStatus::Format,
        Error::Io(_) => DytoxStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DytoxStatus, String)>) -> DytoxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DytoxStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DytoxStatus::Panic
        }
    }
}

fn lib(e: Error) -> (DytoxStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DytoxStatus, String) {
    (DytoxStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, (DytoxStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and NUL-terminated per the caller contract.
    unsafe { CStr::from_ptr(s) }
        .to_str()
        .map_err(|_| (DytoxStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Creates a model with no tasks. `config_json` holds the architecture as a
/// JSON object (null or `{}` for defaults).
///
/// # Safety
/// `config_json` must be null or a valid NUL-terminated string; `out` must
/// be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_new(
    config_json: *const c_char,
    token_expansion: bool,
    independent_heads: bool,
    seed: u64,
    out: *mut *mut DytoxModel,
) -> DytoxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config: ModelConfig = if config_json.is_null() {
            ModelConfig::default()
        } else {
            // SAFETY: forwarded caller contract.
            let text = unsafe { str_arg(config_json, "config_json")? };
            serde_json::from_str(text).map_err(|e| lib(e.into()))?
        };
        let options = ModelOptions {
            token_expansion,
            independent_heads,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(config, options, &mut rng).map_err(lib)?;
        // SAFETY: `out` checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(DytoxModel { model, rng })) };
        Ok(())
    })
}

/// Loads a checkpoint written by `dytox_model_save` or the CLI.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_load(path: *const c_char, out: *mut *mut DytoxModel) -> DytoxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: forwarded caller contract.
        let path = unsafe { str_arg(path, "path")? };
        let ckpt = load_checkpoint(path).map_err(lib)?;
        let rng = ckpt.rng.unwrap_or_else(|| ChaCha8Rng::seed_from_u64(0));
        // SAFETY: `out` checked non-null above.
        unsafe {
            *out = Box::into_raw(Box::new(DytoxModel {
                model: ckpt.model,
                rng,
            }))
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_save(model: *const DytoxModel, path: *const c_char) -> DytoxStatus {
    guard(|| {
        // SAFETY: live handle or null per the caller contract.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        // SAFETY: forwarded caller contract.
        let path = unsafe { str_arg(path, "path")? };
        save_checkpoint(&m.model, Some(&m.rng), path).map_err(lib)
    })
}

/// Adds a task with `classes` new classes.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_expand_task(model: *mut DytoxModel, classes: usize) -> DytoxStatus {
    guard(|| {
        // SAFETY: live handle or null per the caller contract.
        let m = unsafe { model.as_mut() }.ok_or_else(|| null("model"))?;
        m.model.expand_task(classes, &mut m.rng).map_err(lib)
    })
}

/// Tasks learned so far; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_num_tasks(model: *const DytoxModel) -> usize {
    // SAFETY: null or live per the caller contract.
    unsafe { model.as_ref() }.map_or(0, |m| m.model.num_tasks())
}

/// Output width over all tasks; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_num_classes(model: *const DytoxModel) -> usize {
    // SAFETY: null or live per the caller contract.
    unsafe { model.as_ref() }.map_or(0, |m| m.model.num_classes())
}

/// Inference parameter count; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_param_count(model: *const DytoxModel) -> usize {
    // SAFETY: null or live per the caller contract.
    unsafe { model.as_ref() }.map_or(0, |m| m.model.count_params().total)
}

/// Number of floats in one image (`channels · size · size`); 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_image_len(model: *const DytoxModel) -> usize {
    // SAFETY: null or live per the caller contract.
    unsafe { model.as_ref() }.map_or(0, |m| {
        let c = &m.model.config;
        c.channels * c.image_size * c.image_size
    })
}

/// # Safety
/// `images` must hold `batch · image_len` floats.
unsafe fn images_arg(m: &DytoxModel, images: *const f32, batch: usize) -> Result<Tensor<f32>, (DytoxStatus, String)> {
    if images.is_null() {
        return Err(null("images"));
    }
    if batch == 0 {
        return Err((DytoxStatus::InvalidArgument, "batch must be positive".into()));
    }
    let c = &m.model.config;
    let len = batch * c.channels * c.image_size * c.image_size;
    // SAFETY: caller guarantees `len` readable floats.
    let data = unsafe { std::slice::from_raw_parts(images, len) }.to_vec();
    Tensor::new(&[batch, c.channels, c.image_size, c.image_size], data).map_err(lib)
}

/// Sigmoid outputs `[batch, num_classes]` in row-major order.
///
/// # Safety
/// `model` must be a live handle, `images` must hold `batch · image_len`
/// floats and `out` must have room for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_forward(
    model: *const DytoxModel,
    images: *const f32,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> DytoxStatus {
    guard(|| {
        // SAFETY: live handle or null per the caller contract.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = batch * m.model.num_classes();
        if out_len < need {
            return Err((DytoxStatus::InvalidArgument, format!("out holds {out_len} floats, need {need}")));
        }
        // SAFETY: forwarded caller contract.
        let x = unsafe { images_arg(m, images, batch)? };
        let probs = m.model.forward_all(&x, m.model.num_tasks()).map_err(lib)?;
        // SAFETY: `out` has at least `need` slots.
        unsafe { ptr::copy_nonoverlapping(probs.data().as_ptr(), out, need) };
        Ok(())
    })
}

/// Arg-max class per image.
///
/// # Safety
/// As for `dytox_model_forward`, with `out` holding `batch` entries.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_predict(
    model: *const DytoxModel,
    images: *const f32,
    batch: usize,
    out: *mut usize,
) -> DytoxStatus {
    guard(|| {
        // SAFETY: live handle or null per the caller contract.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: forwarded caller contract.
        let x = unsafe { images_arg(m, images, batch)? };
        let preds = m.model.predict(&x).map_err(lib)?;
        // SAFETY: `out` has `batch` slots.
        unsafe { ptr::copy_nonoverlapping(preds.as_ptr(), out, batch) };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dytox_model_free(model: *mut DytoxModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw and not yet freed.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message
/// length excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dytox_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: `buf` has `len` bytes and `n < len`.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dytox_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
