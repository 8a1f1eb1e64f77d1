//! C ABI over the advocacy core.
//!
//! Models are opaque `AdvModel` handles created by [`adv_model_new`] or
//! [`adv_model_load`] and released with [`adv_model_free`]. Every fallible
//! call returns an [`AdvStatus`]; on failure [`adv_last_error`] describes the
//! most recent error on the calling thread. Images are `f32` in `[0, 1]`,
//! laid out batch x channels x height x width. Class labels are 1-based.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use advocacy::autodiff::Mode;
use advocacy::model::{AdvocacyModel, ModelConfig, Variant};
use advocacy::seed::{stream_rng, DROPOUT, INIT};
use advocacy::{checkpoint, metrics, Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Frozen = 7,
    Internal = 8,
}

/// Opaque model handle.
pub struct AdvModel {
    inner: AdvocacyModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AdvStatus {
    match e {
        Error::Shape(_) => AdvStatus::Shape,
        Error::InvalidArgument(_) | Error::NonDeterministic(_) => AdvStatus::InvalidArgument,
        Error::Config { .. } => AdvStatus::Config,
        Error::Frozen(_) => AdvStatus::Frozen,
        Error::Format { .. } => AdvStatus::Format,
        Error::Io { .. } => AdvStatus::Io,
    }
}

struct Failure(AdvStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AdvStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AdvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdvStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            AdvStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Failure(AdvStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const AdvModel) -> Result<&'a AdvModel, Failure> {
    // SAFETY: caller passes a live handle or null.
    unsafe { m.as_ref() }.ok_or_else(|| null("model"))
}

/// Copies `batch` images from `images` into a tensor shaped for `model`.
unsafe fn image_arg(model: &AdvModel, images: *const f32, batch: usize) -> Result<Tensor<f32>, Failure> {
    if images.is_null() {
        return Err(null("images"));
    }
    if batch == 0 {
        return Err(Failure(AdvStatus::InvalidArgument, "batch must be positive".into()));
    }
    let [c, h, w] = model.inner.config().input_shape();
    let n = batch * c * h * w;
    // SAFETY: caller guarantees `images` holds `batch * C * H * W` floats.
    let data = unsafe { std::slice::from_raw_parts(images, n) }.to_vec();
    Ok(Tensor::new([batch, c, h, w], data)?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn adv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized model in eval mode. `variant` is one of
/// `advocacy`, `honest_advocacy`, `multi_attention`, `attention`.
///
/// # Safety
/// `variant` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn adv_model_new(
    variant: *const c_char,
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
    out: *mut *mut AdvModel,
) -> AdvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let variant: Variant = unsafe { str_arg(variant, "variant") }?.parse()?;
        let cfg = ModelConfig::new(variant, num_classes, channels, height, width);
        let mut inner = AdvocacyModel::new(cfg, &mut stream_rng(seed, INIT), stream_rng(seed, DROPOUT))?;
        inner.set_mode(Mode::Eval);
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(AdvModel { inner })) };
        Ok(())
    })
}

/// Loads a checkpoint written by the `advocacy` binary or [`adv_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn adv_model_load(path: *const c_char, out: *mut *mut AdvModel) -> AdvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { str_arg(path, "path") }?;
        let mut inner = checkpoint::load::<f32>(path)?;
        inner.set_mode(Mode::Eval);
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(AdvModel { inner })) };
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn adv_model_save(model: *const AdvModel, path: *const c_char) -> AdvStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let path = unsafe { str_arg(path, "path") }?;
        Ok(checkpoint::save(&m.inner, path)?)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adv_model_free(model: *mut AdvModel) {
    if !model.is_null() {
        // SAFETY: the handle came from Box::into_raw and is freed once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn adv_model_num_classes(model: *const AdvModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.num_classes())
}

/// Writes `batch * num_classes` log-probabilities to `out`.
///
/// # Safety
/// `images` must hold `batch * C * H * W` floats and `out` room for
/// `batch * num_classes`.
#[no_mangle]
pub unsafe extern "C" fn adv_model_log_probs(model: *const AdvModel, images: *const f32, batch: usize, out: *mut f32) -> AdvStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let x = unsafe { image_arg(m, images, batch) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let lp = m.inner.log_probs(&x, 256)?;
        // SAFETY: caller guarantees room for batch * num_classes floats.
        unsafe { ptr::copy_nonoverlapping(lp.data().as_ptr(), out, lp.numel()) };
        Ok(())
    })
}

/// Writes one 1-based predicted class per image to `out`.
///
/// # Safety
/// `images` must hold `batch * C * H * W` floats and `out` room for `batch`.
#[no_mangle]
pub unsafe extern "C" fn adv_model_predict(model: *const AdvModel, images: *const f32, batch: usize, out: *mut u32) -> AdvStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let x = unsafe { image_arg(m, images, batch) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let preds = m.inner.predict(&x)?;
        // SAFETY: caller guarantees room for `batch` labels.
        let out = unsafe { std::slice::from_raw_parts_mut(out, batch) };
        for (o, p) in out.iter_mut().zip(preds) {
            *o = p.get() as u32;
        }
        Ok(())
    })
}

/// Writes the attention map of module `module` (1-based) for one image:
/// `C * H * W` floats in `[0, 1]`.
///
/// # Safety
/// `image` must hold `C * H * W` floats and `out` room for as many.
#[no_mangle]
pub unsafe extern "C" fn adv_model_attention(model: *const AdvModel, image: *const f32, module: usize, out: *mut f32) -> AdvStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let x = unsafe { image_arg(m, image, 1) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, _) = m.inner.advocate_forward(&x, module)?;
        // SAFETY: caller guarantees room for C * H * W floats.
        unsafe { ptr::copy_nonoverlapping(a.data().as_ptr(), out, a.numel()) };
        Ok(())
    })
}

/// Percent reduction in error rate of `acc_model` relative to `acc_baseline`.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn adv_error_reduction(acc_model: f64, acc_baseline: f64, out: *mut f64) -> AdvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r = metrics::error_reduction(acc_model, acc_baseline)?;
        // SAFETY: checked non-null above.
        unsafe { *out = r };
        Ok(())
    })
}
