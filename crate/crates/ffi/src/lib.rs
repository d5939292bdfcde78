//! C interface to trained models: load a checkpoint, predict, pseudo-label
//! and evaluate. Every function returns an [`FctnStatus`]; on failure the
//! message is available from [`fctn_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fctn::metrics::ConfusionMatrix;
use fctn::model::{Branch, FctnModel, Prediction};
use fctn::pseudolabel::agreement_mask;
use fctn::{Error, Tensor};

/// Label value of pixels without a class (unlabeled / ignored).
pub const FCTN_IGNORE_ID: u8 = 255;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FctnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Numeric = 6,
    Panic = 7,
    Other = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FctnBranch {
    F1 = 0,
    F2 = 1,
    Ft = 2,
}

impl From<FctnBranch> for Branch {
    fn from(b: FctnBranch) -> Self {
        match b {
            FctnBranch::F1 => Branch::F1,
            FctnBranch::F2 => Branch::F2,
            FctnBranch::Ft => Branch::Ft,
        }
    }
}

/// Opaque model handle.
pub struct FctnModelHandle {
    model: FctnModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> FctnStatus {
    match e {
        Error::Io { .. } | Error::Dataset(_) => FctnStatus::Io,
        Error::Checkpoint(_) | Error::ParamShape { .. } => FctnStatus::Checkpoint,
        Error::Shape(_) => FctnStatus::Shape,
        Error::NonFinite(_) | Error::Diverged(_) => FctnStatus::Numeric,
        Error::Invalid(_) | Error::Domain(_) | Error::Config(_) => FctnStatus::InvalidArgument,
        _ => FctnStatus::Other,
    }
}

struct Fail(FctnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FctnStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FctnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FctnStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            FctnStatus::Panic
        }
    }
}

unsafe fn handle<'a>(h: *const FctnModelHandle) -> Result<&'a FctnModelHandle, Fail> {
    h.as_ref().ok_or_else(|| null("model"))
}

unsafe fn image_tensor(
    m: &FctnModelHandle,
    image: *const f32,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Tensor<f32>, Fail> {
    if image.is_null() {
        return Err(null("image"));
    }
    if height == 0 || width == 0 {
        return Err(Fail(FctnStatus::InvalidArgument, "empty image".into()));
    }
    if channels != m.model.spec().input_channels {
        return Err(Fail(
            FctnStatus::Shape,
            format!(
                "image has {channels} channels, model expects {}",
                m.model.spec().input_channels
            ),
        ));
    }
    let n = height * width * channels;
    let data = std::slice::from_raw_parts(image, n).to_vec();
    Ok(Tensor::new(&[height, width, channels], data)?)
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fctn_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fctn_model_load(
    path: *const c_char,
    out: *mut *mut FctnModelHandle,
) -> FctnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(FctnStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (model, _) = fctn::trainer::load_model(path)?;
        *out = Box::into_raw(Box::new(FctnModelHandle { model }));
        Ok(())
    })
}

/// Releases a handle from [`fctn_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`fctn_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fctn_model_free(model: *mut FctnModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fctn_model_info(
    model: *const FctnModelHandle,
    num_classes: *mut usize,
    input_channels: *mut usize,
) -> FctnStatus {
    guard(|| {
        let m = handle(model)?;
        if num_classes.is_null() || input_channels.is_null() {
            return Err(null("out"));
        }
        *num_classes = m.model.num_classes();
        *input_channels = m.model.spec().input_channels;
        Ok(())
    })
}

/// Per-pixel class and softmax confidence for one `height x width x
/// channels` image (row-major, channels last, values in [0, 1]).
///
/// # Safety
/// `image` must hold `height*width*channels` floats, `labels` room for
/// `height*width` bytes, `confidence` null or room for `height*width` floats.
#[no_mangle]
pub unsafe extern "C" fn fctn_predict(
    model: *const FctnModelHandle,
    branch: FctnBranch,
    image: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    labels: *mut u8,
    confidence: *mut f32,
) -> FctnStatus {
    guard(|| {
        let m = handle(model)?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let x = image_tensor(m, image, height, width, channels)?;
        let p = m.model.predict(branch.into(), &x)?;
        ptr::copy_nonoverlapping(p.labels.as_ptr(), labels, p.labels.len());
        if !confidence.is_null() {
            ptr::copy_nonoverlapping(p.confidence.as_ptr(), confidence, p.confidence.len());
        }
        Ok(())
    })
}

/// Pseudo-label mask of one image: the F1/F2 class where both agree and
/// the larger confidence reaches `threshold`, else [`FCTN_IGNORE_ID`].
///
/// # Safety
/// As [`fctn_predict`]; `coverage` may be null.
#[no_mangle]
pub unsafe extern "C" fn fctn_pseudo_label(
    model: *const FctnModelHandle,
    image: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    threshold: f64,
    mask: *mut u8,
    coverage: *mut f64,
) -> FctnStatus {
    guard(|| {
        let m = handle(model)?;
        if mask.is_null() {
            return Err(null("mask"));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Fail(
                FctnStatus::InvalidArgument,
                format!("threshold {threshold} outside [0, 1]"),
            ));
        }
        let x = image_tensor(m, image, height, width, channels)?;
        let logits = m.model.logits(&x, &[Branch::F1, Branch::F2])?;
        let p1 = Prediction::from_logits(&logits[0]);
        let p2 = Prediction::from_logits(&logits[1]);
        let out = agreement_mask(&p1, &p2, threshold);
        ptr::copy_nonoverlapping(out.as_ptr(), mask, out.len());
        if !coverage.is_null() {
            let labeled = out.iter().filter(|&&y| y != FCTN_IGNORE_ID).count();
            *coverage = labeled as f64 / out.len() as f64;
        }
        Ok(())
    })
}

/// IoU per class (NaN where undefined) and mIoU over `count` images
/// stored back to back, with their ground-truth masks.
///
/// # Safety
/// `images` must hold `count*height*width*channels` floats, `masks`
/// `count*height*width` bytes, `iou` room for `num_classes` doubles
/// (or null), `miou` a writable double.
#[no_mangle]
pub unsafe extern "C" fn fctn_evaluate(
    model: *const FctnModelHandle,
    branch: FctnBranch,
    images: *const f32,
    masks: *const u8,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    iou: *mut f64,
    miou: *mut f64,
) -> FctnStatus {
    guard(|| {
        let m = handle(model)?;
        if masks.is_null() {
            return Err(null("masks"));
        }
        if miou.is_null() {
            return Err(null("miou"));
        }
        let px = height * width;
        let mut cm = ConfusionMatrix::new(m.model.num_classes());
        for i in 0..count {
            let x = image_tensor(m, images.add(i * px * channels), height, width, channels)?;
            let gt = std::slice::from_raw_parts(masks.add(i * px), px);
            let p = m.model.predict(branch.into(), &x)?;
            cm.accumulate(&p.labels, gt)?;
        }
        let r = cm.iou_report();
        if !iou.is_null() {
            for (k, v) in r.iou.iter().enumerate() {
                *iou.add(k) = v.unwrap_or(f64::NAN);
            }
        }
        *miou = r.miou.unwrap_or(f64::NAN);
        Ok(())
    })
}
