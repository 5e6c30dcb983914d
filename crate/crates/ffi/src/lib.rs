//! C ABI over `dpa-core`: model loading and embedding, retrieval scoring
//! and pooling on caller-owned buffers.
//!
//! Every fallible function returns a [`DpaStatus`]; on failure a message is
//! kept per thread and can be read with [`dpa_last_error_message`]. Panics
//! never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use dpa_core::attention::AttentionVariant;
use dpa_core::eval::{evaluate, DistanceMatrix, Labels, Metric};
use dpa_core::harness::load_checkpoint;
use dpa_core::model::{BackboneConfig, Model};
use dpa_core::pooling::{pool, GemParams, PoolAxis, PoolKind, SoftMode};
use dpa_core::{DpaError, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    ConfigInvalid = 4,
    CheckpointMismatch = 5,
    Io = 6,
    Format = 7,
    NoValidMatch = 8,
    NumericError = 9,
    Panic = 10,
}

/// Attention units inserted by `dpa_model_new`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpaAttention {
    None = 0,
    Dual = 1,
    ChannelOnly = 2,
    SpatialOnly = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpaPoolKind {
    Avg = 0,
    Min = 1,
    Gem = 2,
    Soft = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpaPoolAxis {
    Spatial = 0,
    Channel = 1,
}

macro_rules! from_raw {
    ($ty:ident { $($variant:ident),* $(,)? }) => {
        impl $ty {
            fn from_raw(raw: u32) -> Result<Self, Failure> {
                $(if raw == $ty::$variant as u32 {
                    return Ok($ty::$variant);
                })*
                Err(invalid(format!("{raw} is not a valid {}", stringify!($ty))))
            }
        }
    };
}

from_raw!(DpaAttention { None, Dual, ChannelOnly, SpatialOnly });
from_raw!(DpaPoolKind { Avg, Min, Gem, Soft });
from_raw!(DpaPoolAxis { Spatial, Channel });

/// Retrieval metrics of one evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DpaMetrics {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub minp: f64,
}

/// Opaque model handle.
pub struct DpaModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DpaStatus, String);

impl From<DpaError> for Failure {
    fn from(e: DpaError) -> Self {
        let status = match &e {
            DpaError::ShapeMismatch(_) | DpaError::SpatialSizeMismatch { .. } | DpaError::DimensionMismatch(_) => {
                DpaStatus::ShapeMismatch
            }
            DpaError::ConfigInvalid(_)
            | DpaError::InvalidAlpha(_)
            | DpaError::LabelOutOfRange { .. }
            | DpaError::InsufficientIdentities { .. } => DpaStatus::ConfigInvalid,
            DpaError::CheckpointMismatch(_) => DpaStatus::CheckpointMismatch,
            DpaError::Io(_) | DpaError::MissingImage(_) => DpaStatus::Io,
            DpaError::Parse { .. } | DpaError::Format(_) | DpaError::NonDenseIdentityIds { .. } => DpaStatus::Format,
            DpaError::NoValidMatch(_) => DpaStatus::NoValidMatch,
            DpaError::NonFiniteValue { .. } | DpaError::NotScalarLoss(_) | DpaError::DegenerateBatch => {
                DpaStatus::NumericError
            }
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DpaStatus::NullArgument, format!("`{what}` is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(DpaStatus::InvalidArgument, message.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DpaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DpaStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {message}"));
            DpaStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to `len` writable values.
unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

/// Message of the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dpa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dpa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an untrained model with the default backbone: four stages,
/// attention (if any) after the third, `height`×`width` inputs.
/// `attention` is a `DpaAttention` value.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dpa_model_new(
    height: usize,
    width: usize,
    num_classes: usize,
    attention: u32,
    seed: u64,
    out: *mut *mut DpaModel,
) -> DpaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = BackboneConfig {
            input_size: (height, width),
            num_classes,
            ..BackboneConfig::default()
        };
        match DpaAttention::from_raw(attention)? {
            DpaAttention::None => cfg.dpa_after_stage.clear(),
            DpaAttention::Dual => cfg.attention = AttentionVariant::Dual,
            DpaAttention::ChannelOnly => cfg.attention = AttentionVariant::ChannelOnly,
            DpaAttention::SpatialOnly => cfg.attention = AttentionVariant::SpatialOnly,
        }
        let model = Model::build(&cfg, seed)?;
        *out = Box::into_raw(Box::new(DpaModel { model }));
        Ok(())
    })
}

/// Loads a checkpoint written by `dpa train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpa_model_load(path: *const c_char, out: *mut *mut DpaModel) -> DpaStatus {
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
        let model = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(DpaModel { model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpa_model_free(model: *mut DpaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width of `model`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dpa_model_embed_dim(model: *const DpaModel, out: *mut usize) -> DpaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *output(out, 1, "out")?.first_mut().expect("one slot") = m.model.config().embed_dim();
        Ok(())
    })
}

/// Expected input height and width.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn dpa_model_input_size(
    model: *const DpaModel,
    height: *mut usize,
    width: *mut usize,
) -> DpaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let (h, w) = m.model.config().input_size;
        output(height, 1, "height")?[0] = h;
        output(width, 1, "width")?[0] = w;
        Ok(())
    })
}

/// Eval-mode embeddings of `count` images laid out `count×3×H×W`
/// (row-major, values in `[0, 1]`), written to `out` as `count×D`.
///
/// # Safety
/// `images` must hold `count·3·H·W` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn dpa_model_embed(
    model: *mut DpaModel,
    images: *const f64,
    count: usize,
    out: *mut f64,
    out_len: usize,
) -> DpaStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if count == 0 {
            return Err(invalid("count must be positive"));
        }
        let (h, w) = m.model.config().input_size;
        let d = m.model.config().embed_dim();
        if out_len != count * d {
            return Err(Failure(
                DpaStatus::ShapeMismatch,
                format!("out holds {out_len} values, need {count}×{d}"),
            ));
        }
        let data = input(images, count * 3 * h * w, "images")?.to_vec();
        let x = Tensor::new(&[count, 3, h, w], data)?;
        let e = m.model.embed(&x, 64)?;
        output(out, out_len, "out")?.copy_from_slice(e.data());
        Ok(())
    })
}

/// Scores a `queries×gallery` row-major distance matrix.
///
/// # Safety
/// `distances` must hold `queries·gallery` values, the query arrays
/// `queries` values, the gallery arrays `gallery` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dpa_evaluate(
    distances: *const f64,
    queries: usize,
    gallery: usize,
    query_ids: *const usize,
    query_cams: *const usize,
    gallery_ids: *const usize,
    gallery_cams: *const usize,
    cross_camera_filter: bool,
    out: *mut DpaMetrics,
) -> DpaStatus {
    guard(|| {
        let values = input(distances, queries * gallery, "distances")?.to_vec();
        let dist = DistanceMatrix::new(values, queries, gallery, Metric::Euclidean)?;
        let labels = Labels {
            query_ids: input(query_ids, queries, "query_ids")?,
            query_cams: input(query_cams, queries, "query_cams")?,
            gallery_ids: input(gallery_ids, gallery, "gallery_ids")?,
            gallery_cams: input(gallery_cams, gallery, "gallery_cams")?,
        };
        let r = evaluate(&dist, &labels, cross_camera_filter)?;
        output(out, 1, "out")?[0] = DpaMetrics {
            map: r.map,
            rank1: r.rank1,
            rank5: r.rank5,
            rank10: r.rank10,
            rank20: r.rank20,
            minp: r.minp,
        };
        Ok(())
    })
}

/// Pools an `n×c×h×w` buffer. Spatial pooling writes `n·c` values, channel
/// pooling `n·h·w`. `kind` is a `DpaPoolKind`, `axis` a `DpaPoolAxis`;
/// `alpha` is read for GeM only.
///
/// # Safety
/// `x` must hold `n·c·h·w` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn dpa_pool(
    x: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kind: u32,
    alpha: f64,
    axis: u32,
    out: *mut f64,
    out_len: usize,
) -> DpaStatus {
    guard(|| {
        let data = input(x, n * c * h * w, "x")?.to_vec();
        let t = Tensor::new(&[n, c, h, w], data)?;
        let kind = match DpaPoolKind::from_raw(kind)? {
            DpaPoolKind::Avg => PoolKind::Avg,
            DpaPoolKind::Min => PoolKind::Min,
            DpaPoolKind::Gem => PoolKind::Gem(GemParams::new(alpha)?),
            DpaPoolKind::Soft => PoolKind::Soft(SoftMode::Scalar),
        };
        let axis = match DpaPoolAxis::from_raw(axis)? {
            DpaPoolAxis::Spatial => PoolAxis::Spatial,
            DpaPoolAxis::Channel => PoolAxis::Channel,
        };
        let y = pool(&t, kind, axis)?;
        if y.numel() != out_len {
            return Err(Failure(
                DpaStatus::ShapeMismatch,
                format!("out holds {out_len} values, pooling yields {}", y.numel()),
            ));
        }
        output(out, out_len, "out")?.copy_from_slice(y.data());
        Ok(())
    })
}
