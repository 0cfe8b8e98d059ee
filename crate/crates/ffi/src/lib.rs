//! C ABI over the `vov3d` crate.
//!
//! Every function returns a [`Vov3dStatus`]; on failure the message is kept
//! per thread and can be read with [`vov3d_last_error`]. Models are opaque
//! handles created by a `vov3d_model_*` constructor and released with
//! [`vov3d_model_free`].
//!
//! # Safety
//!
//! Pointer arguments must be valid for the duration of the call. Output
//! pointers must be writable. Buffers must hold at least the stated number
//! of elements. Null pointers are rejected with
//! [`Vov3dStatus::NullPointer`].
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use vov3d::analysis::{model_cost, trf_profile};
use vov3d::blocks::Variant;
use vov3d::net::{ArchGraph, ModelWeights, Size, VoV3D};
use vov3d::{Error, Rng, Shape5, Tensor5};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vov3dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    NonFinite = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vov3dSize {
    M = 0,
    L = 1,
}

/// Bottleneck core factorization.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vov3dVariant {
    Bottleneck = 0,
    R21d = 1,
    DwBottleneck = 2,
    D12d = 3,
    D21d = 4,
}

impl From<Vov3dVariant> for Variant {
    fn from(v: Vov3dVariant) -> Self {
        match v {
            Vov3dVariant::Bottleneck => Variant::Bottleneck,
            Vov3dVariant::R21d => Variant::R21d,
            Vov3dVariant::DwBottleneck => Variant::DwBottleneck,
            Vov3dVariant::D12d => Variant::D12d,
            Vov3dVariant::D21d => Variant::D21d,
        }
    }
}

impl From<Vov3dSize> for Size {
    fn from(s: Vov3dSize) -> Self {
        match s {
            Vov3dSize::M => Size::M,
            Vov3dSize::L => Size::L,
        }
    }
}

/// Opaque network handle.
pub struct Vov3dModel {
    inner: VoV3D,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> Vov3dStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::ChannelMismatch { .. } => Vov3dStatus::ShapeMismatch,
        Error::Io(_) => Vov3dStatus::Io,
        Error::Format(_) | Error::Toml(_) | Error::TomlSer(_) | Error::Json(_) => Vov3dStatus::Format,
        Error::NonFinite(_) => Vov3dStatus::NonFinite,
        _ => Vov3dStatus::InvalidArgument,
    }
}

struct Fail(Vov3dStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(Vov3dStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Vov3dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            Vov3dStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            Vov3dStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const Vov3dModel) -> Result<&'a VoV3D, Fail> {
    model.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(Vov3dStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn emit_model(graph: ArchGraph, seed: u64, out: *mut *mut Vov3dModel) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let inner = VoV3D::build(graph, &mut Rng::new(seed))?;
    *out = Box::into_raw(Box::new(Vov3dModel { inner }));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn vov3d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Full-size network with `classes` outputs and random weights.
#[no_mangle]
pub unsafe extern "C" fn vov3d_model_new(
    size: Vov3dSize,
    variant: Vov3dVariant,
    classes: usize,
    seed: u64,
    out: *mut *mut Vov3dModel,
) -> Vov3dStatus {
    guard(|| emit_model(ArchGraph::vov3d(size.into(), variant.into(), classes), seed, out))
}

/// Desk-scale network.
#[no_mangle]
pub unsafe extern "C" fn vov3d_model_new_tiny(
    variant: Vov3dVariant,
    classes: usize,
    seed: u64,
    out: *mut *mut Vov3dModel,
) -> Vov3dStatus {
    guard(|| emit_model(ArchGraph::tiny(variant.into(), classes), seed, out))
}

/// Network from an architecture description in TOML.
#[no_mangle]
pub unsafe extern "C" fn vov3d_model_from_config(config: *const c_char, seed: u64, out: *mut *mut Vov3dModel) -> Vov3dStatus {
    guard(|| {
        let graph = ArchGraph::from_toml(str_arg(config, "config")?)?;
        emit_model(graph, seed, out)
    })
}

#[no_mangle]
pub unsafe extern "C" fn vov3d_model_free(model: *mut Vov3dModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn vov3d_model_num_params(model: *const Vov3dModel, out: *mut u64) -> Vov3dStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.num_params();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn vov3d_model_num_classes(model: *const Vov3dModel, out: *mut usize) -> Vov3dStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.graph.num_classes;
        Ok(())
    })
}

/// Widest temporal receptive field of the pre-pool features, in frames.
#[no_mangle]
pub unsafe extern "C" fn vov3d_model_max_trf(model: *const Vov3dModel, out: *mut usize) -> Vov3dStatus {
    guard(|| {
        let m = model_ref(model)?;
        let profile = trf_profile(&m.graph)?;
        *out.as_mut().ok_or_else(|| null("out"))? = profile.features().max_trf();
        Ok(())
    })
}

/// Eval-mode logits for a batch laid out `n x c x t x h x w` (row-major).
/// `logits` receives `n x classes` values.
#[no_mangle]
pub unsafe extern "C" fn vov3d_model_infer(
    model: *const Vov3dModel,
    input: *const f64,
    n: usize,
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    logits: *mut f64,
    logits_len: usize,
) -> Vov3dStatus {
    guard(|| {
        let m = model_ref(model)?;
        if input.is_null() {
            return Err(null("input"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let shape = Shape5::new(n, c, t, h, w);
        let len = shape.checked_numel()?;
        let need = n * m.graph.num_classes;
        if logits_len < need {
            return Err(Fail(Vov3dStatus::BufferTooSmall, format!("logits buffer holds {logits_len}, need {need}")));
        }
        let x = Tensor5::from_vec(shape, std::slice::from_raw_parts(input, len).to_vec())?;
        let y = m.infer(&x)?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(y.data());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn vov3d_model_save_weights(model: *const Vov3dModel, path: *const c_char) -> Vov3dStatus {
    guard(|| {
        let m = model_ref(model)?;
        m.weights().save(str_arg(path, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn vov3d_model_load_weights(model: *mut Vov3dModel, path: *const c_char) -> Vov3dStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let w = ModelWeights::load(str_arg(path, "path")?)?;
        m.inner.load_weights(&w)?;
        Ok(())
    })
}

/// Parameter count and comparable FLOPs (1 MAC = 1 FLOP) of a full-size
/// network at one `frames x spatial x spatial` clip.
#[no_mangle]
pub unsafe extern "C" fn vov3d_model_cost(
    size: Vov3dSize,
    variant: Vov3dVariant,
    frames: usize,
    spatial: usize,
    params: *mut u64,
    flops: *mut u64,
) -> Vov3dStatus {
    guard(|| {
        if params.is_null() || flops.is_null() {
            return Err(null("output"));
        }
        let r = model_cost(size.into(), variant.into(), frames, spatial)?;
        *params = r.total_params;
        *flops = r.comparable_flops;
        Ok(())
    })
}
