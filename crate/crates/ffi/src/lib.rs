//! C ABI over the frnet pipeline.
//!
//! Every function returns an [`FrStatus`]. On failure a message for the
//! calling thread can be fetched with [`fr_last_error_message`]. Panics are
//! caught at the boundary and reported as [`FrStatus::Panic`].
//!
//! Images are row-major `f32` planes with intensities in `[0, 1]`; network
//! inputs are standardized 28×28 planes as produced by [`fr_flow_to_inputs`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use frnet::autodiff::Tensor;
use frnet::flow::{flow_to_inputs, spot_apex, tvl1_flow, FlowField, GrayFrame, TvL1Params, NET_INPUT_SIZE};
use frnet::model::{count_parameters, read_checkpoint, Model, ModelConfig, Variant};
use frnet::protocols::{compute_metrics, ConfusionMatrix};
use frnet::Error;

/// Side length of a network input plane.
pub const FR_INPUT_SIZE: usize = 28;
const _: () = assert!(FR_INPUT_SIZE == NET_INPUT_SIZE);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Data = 3,
    Io = 4,
    Format = 5,
    Shape = 6,
    NonFinite = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrVariant {
    Basic = 0,
    Fr = 1,
    FrFc = 2,
    FrConcat = 3,
}

impl From<FrVariant> for Variant {
    fn from(v: FrVariant) -> Self {
        match v {
            FrVariant::Basic => Variant::Basic,
            FrVariant::Fr => Variant::Fr,
            FrVariant::FrFc => Variant::FrFc,
            FrVariant::FrConcat => Variant::FrConcat,
        }
    }
}

/// Aggregate metrics of [`fr_compute_metrics`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrMetrics {
    pub acc: f64,
    pub uf1: f64,
    pub uar: f64,
}

/// A trained network loaded from a checkpoint file.
pub struct FrModel {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(FrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Usage(_) | Error::Config(_) => FrStatus::InvalidArgument,
            Error::Data(_) | Error::Validation { .. } | Error::Parse { .. } | Error::Protocol(_) => FrStatus::Data,
            Error::Io { .. } | Error::Image { .. } => FrStatus::Io,
            Error::Format { .. } | Error::Json(_) => FrStatus::Format,
            Error::Shape { .. } => FrStatus::Shape,
            Error::NonFinite(_) => FrStatus::NonFinite,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FrStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FrStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FrStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (FrStatus::Ok, String::new()),
        Ok(Err(Failure(status, msg))) => (status, msg),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (FrStatus::Panic, format!("panic: {msg}"))
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

/// # Safety
/// `ptr` must be null or valid for reading `len` values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for writing `len` values.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn plane_len(height: usize, width: usize) -> Result<usize, Failure> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("bad image size {height}x{width}")))
}

fn frame(px: &[f32], height: usize, width: usize) -> Result<GrayFrame, Failure> {
    Ok(GrayFrame::new(height, width, px.to_vec())?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message (empty after a success)
/// into `buf` as a NUL-terminated string, truncating to `len - 1` bytes.
/// Returns the buffer size the full message needs, NUL included.
///
/// # Safety
/// `buf` must be null or valid for writing `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads a checkpoint file. The handle must be released with
/// [`fr_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn fr_model_load(path: *const c_char, out: *mut *mut FrModel) -> FrStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let (config, params) = read_checkpoint(Path::new(path))?;
        let model = Model::from_parts(config, params)?;
        *out = Box::into_raw(Box::new(FrModel { model }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`fr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fr_model_free(model: *mut FrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes K of a loaded model.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn fr_model_num_classes(model: *const FrModel, out: *mut usize) -> FrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = model.model.config.num_classes;
        Ok(())
    })
}

/// Classifies `n` samples. `u` and `v` hold `n` standardized 28×28 planes
/// each. Writes `n` class indices to `labels` and, when `logits` is not
/// null, `n × K` logits.
///
/// # Safety
/// Pointers must be valid for the sizes above; `logits` may be null.
#[no_mangle]
pub unsafe extern "C" fn fr_model_predict(
    model: *const FrModel,
    u: *const f32,
    v: *const f32,
    n: usize,
    labels: *mut u32,
    logits: *mut f32,
) -> FrStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if n == 0 {
            return Err(invalid("no samples"));
        }
        let plane = FR_INPUT_SIZE * FR_INPUT_SIZE;
        let len = n.checked_mul(plane).ok_or_else(|| invalid("sample count overflows"))?;
        let shape = [n, 1, FR_INPUT_SIZE, FR_INPUT_SIZE];
        let u = Tensor::new(shape, slice(u, len, "u")?.to_vec())?;
        let v = Tensor::new(shape, slice(v, len, "v")?.to_vec())?;
        let labels = slice_mut(labels, n, "labels")?;
        let out = model.evaluate(&u, &v)?;
        let k = model.config.num_classes;
        for (dst, row) in labels.iter_mut().zip(out.logits.data().chunks_exact(k)) {
            *dst = frnet::model::argmax(row) as u32;
        }
        if !logits.is_null() {
            slice_mut(logits, n * k, "logits")?.copy_from_slice(out.logits.data());
        }
        Ok(())
    })
}

/// Learnable parameter count of a variant with K classes and default sizes.
///
/// # Safety
/// `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn fr_count_parameters(variant: FrVariant, k: usize, out: *mut u64) -> FrStatus {
    guard(|| {
        let config = ModelConfig::new(variant.into(), k);
        config.validate()?;
        *out.as_mut().ok_or_else(|| null("out"))? = count_parameters(&config) as u64;
        Ok(())
    })
}

/// TV-L1 flow from `onset` to `apex` (both `height × width`) with default
/// solver settings. Writes the horizontal and vertical components.
///
/// # Safety
/// All pointers must be valid for `height * width` values.
#[no_mangle]
pub unsafe extern "C" fn fr_tvl1_flow(
    onset: *const f32,
    apex: *const f32,
    height: usize,
    width: usize,
    out_u: *mut f32,
    out_v: *mut f32,
) -> FrStatus {
    guard(|| {
        let len = plane_len(height, width)?;
        let onset = frame(slice(onset, len, "onset")?, height, width)?;
        let apex = frame(slice(apex, len, "apex")?, height, width)?;
        let flow = tvl1_flow(&onset, &apex, &TvL1Params::default())?;
        slice_mut(out_u, len, "out_u")?.copy_from_slice(flow.u());
        slice_mut(out_v, len, "out_v")?.copy_from_slice(flow.v());
        Ok(())
    })
}

/// Resizes a `height × width` flow to 28×28 and standardizes each
/// component, giving the inputs of [`fr_model_predict`].
///
/// # Safety
/// `u` and `v` must hold `height * width` values; the outputs 784 each.
#[no_mangle]
pub unsafe extern "C" fn fr_flow_to_inputs(
    u: *const f32,
    v: *const f32,
    height: usize,
    width: usize,
    out_u: *mut f32,
    out_v: *mut f32,
) -> FrStatus {
    guard(|| {
        let len = plane_len(height, width)?;
        let field = FlowField::new(
            height,
            width,
            slice(u, len, "u")?.to_vec(),
            slice(v, len, "v")?.to_vec(),
        )?;
        let (iu, iv) = flow_to_inputs(&field)?;
        let plane = FR_INPUT_SIZE * FR_INPUT_SIZE;
        slice_mut(out_u, plane, "out_u")?.copy_from_slice(iu.data());
        slice_mut(out_v, plane, "out_v")?.copy_from_slice(iv.data());
        Ok(())
    })
}

/// Apex index of a clip of `n_frames` consecutive `height × width` frames,
/// frame 0 being the onset.
///
/// # Safety
/// `frames` must hold `n_frames * height * width` values.
#[no_mangle]
pub unsafe extern "C" fn fr_spot_apex(
    frames: *const f32,
    n_frames: usize,
    height: usize,
    width: usize,
    out: *mut usize,
) -> FrStatus {
    guard(|| {
        let len = plane_len(height, width)?;
        let total = n_frames
            .checked_mul(len)
            .ok_or_else(|| invalid("clip size overflows"))?;
        let px = slice(frames, total, "frames")?;
        let clip = px
            .chunks_exact(len)
            .map(|f| frame(f, height, width))
            .collect::<Result<Vec<_>, _>>()?;
        *out.as_mut().ok_or_else(|| null("out"))? = spot_apex(&clip)?;
        Ok(())
    })
}

/// Metrics over `n_folds` K×K confusion matrices stored back to back,
/// each row-major with rows indexed by the true class.
///
/// # Safety
/// `counts` must hold `n_folds * k * k` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_compute_metrics(
    counts: *const u64,
    k: usize,
    n_folds: usize,
    out: *mut FrMetrics,
) -> FrStatus {
    guard(|| {
        if k == 0 || n_folds == 0 {
            return Err(invalid("need k >= 1 and at least one fold"));
        }
        let per = k.checked_mul(k).ok_or_else(|| invalid("k overflows"))?;
        let total = per
            .checked_mul(n_folds)
            .ok_or_else(|| invalid("fold count overflows"))?;
        let counts = slice(counts, total, "counts")?;
        let folds = counts
            .chunks_exact(per)
            .map(|c| ConfusionMatrix::from_rows(c.chunks_exact(k).map(<[u64]>::to_vec).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        let report = compute_metrics(&folds)?;
        *out.as_mut().ok_or_else(|| null("out"))? = FrMetrics {
            acc: report.acc,
            uf1: report.uf1,
            uar: report.uar,
        };
        Ok(())
    })
}
