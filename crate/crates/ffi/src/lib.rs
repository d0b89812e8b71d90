//! C ABI over the segmentation pipeline.
//!
//! Objects cross the boundary as opaque handles created by `dys_*_new`,
//! `dys_*_open` or `dys_*_load` and released by the matching `dys_*_free`.
//! Every fallible call returns a `DysStatus`; on failure the message is
//! available from `dys_last_error` on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dysseg::eval::{case_metrics, control_specificity, RoiConfusion};
use dysseg::infer::{binarize, infer_canvas, post_process, InferParams, PostprocessParams, ProbabilityCanvas};
use dysseg::model::{images_to_batch, Mode, ModelConfig, TransUnet};
use dysseg::morph::Mask;
use dysseg::stain::estimate_stain_matrix;
use dysseg::wsi::{tessellate, SlideClass, WsiPyramid};
use dysseg::Error;
use image::RgbImage;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DysStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Validation = 4,
    MissingPath = 5,
    Checkpoint = 6,
    Io = 7,
    State = 8,
    Compute = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for DysStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => DysStatus::Config,
            Error::Validation(_) => DysStatus::Validation,
            Error::MissingPath(_) => DysStatus::MissingPath,
            Error::Checkpoint(_) => DysStatus::Checkpoint,
            Error::Io(_) | Error::Image(_) | Error::Json(_) => DysStatus::Io,
            Error::State(_) => DysStatus::State,
            Error::Shape(_) | Error::Geometry(_) | Error::Estimation(_) | Error::Bounds(_) => DysStatus::Compute,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DysStatus, msg: impl Into<String>) -> DysStatus {
    set_error(msg.into());
    status
}

/// Run `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), DysStatus>) -> DysStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DysStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DysStatus::Panic, msg)
        }
    }
}

fn lib<T>(r: dysseg::Result<T>) -> Result<T, DysStatus> {
    r.map_err(|e| fail(DysStatus::from(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, DysStatus> {
    if p.is_null() {
        return Err(fail(DysStatus::NullArgument, "null path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(DysStatus::InvalidUtf8, "path is not UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, DysStatus> {
    p.as_ref().ok_or_else(|| fail(DysStatus::NullArgument, "null handle"))
}

unsafe fn out_ptr<'a, T>(p: *mut T) -> Result<&'a mut T, DysStatus> {
    p.as_mut().ok_or_else(|| fail(DysStatus::NullArgument, "null output pointer"))
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize) -> Result<&'a [T], DysStatus> {
    if p.is_null() {
        return Err(fail(DysStatus::NullArgument, "null input buffer"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize) -> Result<&'a mut [T], DysStatus> {
    if p.is_null() {
        return Err(fail(DysStatus::NullArgument, "null output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn rgb_image(data: &[u8], width: u32, height: u32) -> Result<RgbImage, DysStatus> {
    RgbImage::from_raw(width, height, data.to_vec())
        .ok_or_else(|| fail(DysStatus::Validation, "pixel buffer does not match width × height × 3"))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dys_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dys_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque segmentation model.
pub struct DysModel(TransUnet);

/// Opaque whole-slide image pyramid.
pub struct DysSlide(WsiPyramid);

/// Opaque stitched probability canvas.
pub struct DysCanvas(ProbabilityCanvas);

/// Opaque binary mask.
pub struct DysMask(Mask);

fn boxed<T>(v: T, out: &mut *mut T) {
    *out = Box::into_raw(Box::new(v));
}

/// Untrained 64-px toy model with seeded weights, in eval mode.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dys_model_new_toy(seed: u64, out: *mut *mut DysModel) -> DysStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let mut m = lib(TransUnet::new(ModelConfig::toy(), seed))?;
        m.set_mode(Mode::Eval);
        boxed(DysModel(m), out);
        Ok(())
    })
}

/// Load a checkpoint written by `dysseg train` with its model config JSON.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dys_model_load(
    config_json: *const c_char,
    checkpoint: *const c_char,
    out: *mut *mut DysModel,
) -> DysStatus {
    guard(|| {
        let cfg_path = path_arg(config_json)?;
        let ck = path_arg(checkpoint)?;
        let out = out_ptr(out)?;
        if !cfg_path.exists() {
            return Err(fail(DysStatus::MissingPath, format!("missing path: {}", cfg_path.display())));
        }
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| fail(DysStatus::Io, e.to_string()))?;
        let cfg: ModelConfig =
            serde_json::from_str(&text).map_err(|e| fail(DysStatus::Config, format!("{}: {e}", cfg_path.display())))?;
        let mut m = lib(TransUnet::load(cfg, &ck))?;
        m.set_mode(Mode::Eval);
        boxed(DysModel(m), out);
        Ok(())
    })
}

/// Side length of the square input the model expects.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dys_model_input_size(model: *const DysModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().input_size)
}

/// Foreground probabilities for `n` interleaved RGB images of the model's
/// input size. `out` receives `n · S · S` values.
///
/// # Safety
/// `rgb` must hold `n · S · S · 3` bytes and `out` room for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dys_model_predict(
    model: *const DysModel,
    rgb: *const u8,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> DysStatus {
    guard(|| {
        let m = &handle(model)?.0;
        let s = m.config().input_size;
        if n == 0 {
            return Err(fail(DysStatus::Validation, "no images"));
        }
        if out_len < n * s * s {
            return Err(fail(DysStatus::BufferTooSmall, format!("need {} floats", n * s * s)));
        }
        let data = slice_in(rgb, n * s * s * 3)?;
        let imgs: Vec<RgbImage> = data
            .chunks(s * s * 3)
            .map(|c| rgb_image(c, s as u32, s as u32))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let probs = lib(m.predict_foreground(&lib(images_to_batch(&refs))?))?;
        for (o, &p) in slice_out(out, n * s * s)?.iter_mut().zip(probs.data()) {
            *o = p as f32;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dys_model_free(model: *mut DysModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Open a slide pyramid directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dys_slide_open(dir: *const c_char, out: *mut *mut DysSlide) -> DysStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        let out = out_ptr(out)?;
        boxed(DysSlide(lib(WsiPyramid::open(&dir))?), out);
        Ok(())
    })
}

/// Canvas extents of the slide at `mpp`.
///
/// # Safety
/// `slide` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dys_slide_canvas_extent(
    slide: *const DysSlide,
    mpp: f64,
    width: *mut usize,
    height: *mut usize,
) -> DysStatus {
    guard(|| {
        let s = &handle(slide)?.0;
        if !(mpp > 0.0) {
            return Err(fail(DysStatus::Validation, "mpp must be positive"));
        }
        let (w, h) = s.canvas_extent(mpp);
        *out_ptr(width)? = w;
        *out_ptr(height)? = h;
        Ok(())
    })
}

/// # Safety
/// `slide` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dys_slide_free(slide: *mut DysSlide) {
    if !slide.is_null() {
        drop(Box::from_raw(slide));
    }
}

/// Sliding-window inference parameters.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DysInferParams {
    pub patch: usize,
    pub overlap: usize,
    pub mpp: f64,
    pub min_tissue_frac: f64,
    pub batch_size: usize,
    pub workers: usize,
}

/// Defaults for a model with the given input size.
#[no_mangle]
pub extern "C" fn dys_infer_params_default(patch: usize) -> DysInferParams {
    let d = InferParams::default();
    DysInferParams {
        patch,
        overlap: (patch * d.overlap + d.patch / 2) / d.patch.max(1),
        mpp: d.mpp,
        min_tissue_frac: d.min_tissue_frac,
        batch_size: d.batch_size,
        workers: d.workers,
    }
}

/// Tile, predict and stitch a slide into a finalized probability canvas.
///
/// # Safety
/// Handles must be live; `params` and `out` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dys_infer(
    slide: *const DysSlide,
    model: *const DysModel,
    params: *const DysInferParams,
    out: *mut *mut DysCanvas,
) -> DysStatus {
    guard(|| {
        let s = &handle(slide)?.0;
        let m = &handle(model)?.0;
        let p = *handle(params)?;
        let out = out_ptr(out)?;
        let params = InferParams {
            patch: p.patch,
            overlap: p.overlap,
            mpp: p.mpp,
            min_tissue_frac: p.min_tissue_frac,
            batch_size: p.batch_size,
            workers: p.workers,
        };
        boxed(DysCanvas(lib(infer_canvas(s, m, &params))?), out);
        Ok(())
    })
}

/// # Safety
/// `canvas` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dys_canvas_size(canvas: *const DysCanvas, width: *mut usize, height: *mut usize) -> DysStatus {
    guard(|| {
        let c = &handle(canvas)?.0;
        *out_ptr(width)? = c.width;
        *out_ptr(height)? = c.height;
        Ok(())
    })
}

/// Copy the row-major probabilities into `out`.
///
/// # Safety
/// `out` must have room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn dys_canvas_probabilities(canvas: *const DysCanvas, out: *mut f32, len: usize) -> DysStatus {
    guard(|| {
        let c = &handle(canvas)?.0;
        let probs = lib(c.probabilities())?;
        if len < probs.len() {
            return Err(fail(DysStatus::BufferTooSmall, format!("need {} floats", probs.len())));
        }
        slice_out(out, probs.len())?.copy_from_slice(probs);
        Ok(())
    })
}

/// # Safety
/// `canvas` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dys_canvas_free(canvas: *mut DysCanvas) {
    if !canvas.is_null() {
        drop(Box::from_raw(canvas));
    }
}

/// Threshold and morphology settings.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DysPostprocessParams {
    pub threshold: f64,
    pub close_kernel: usize,
    pub open_kernel: usize,
    pub min_object_area: usize,
    pub min_hole_area: usize,
}

#[no_mangle]
pub extern "C" fn dys_postprocess_params_default() -> DysPostprocessParams {
    let d = PostprocessParams::default();
    DysPostprocessParams {
        threshold: d.threshold,
        close_kernel: d.close_kernel,
        open_kernel: d.open_kernel,
        min_object_area: d.min_object_area,
        min_hole_area: d.min_hole_area,
    }
}

/// Binarize a canvas (`p > threshold`) and clean it up morphologically.
///
/// # Safety
/// `canvas` must be live; `params` and `out` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dys_postprocess(
    canvas: *const DysCanvas,
    params: *const DysPostprocessParams,
    out: *mut *mut DysMask,
) -> DysStatus {
    guard(|| {
        let c = &handle(canvas)?.0;
        let p = *handle(params)?;
        let out = out_ptr(out)?;
        let params = PostprocessParams {
            threshold: p.threshold,
            close_kernel: p.close_kernel,
            open_kernel: p.open_kernel,
            min_object_area: p.min_object_area,
            min_hole_area: p.min_hole_area,
        };
        lib(params.validate())?;
        let m = post_process(&lib(binarize(c, params.threshold))?, &params);
        boxed(DysMask(m), out);
        Ok(())
    })
}

/// # Safety
/// `mask` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dys_mask_size(mask: *const DysMask, width: *mut usize, height: *mut usize) -> DysStatus {
    guard(|| {
        let m = &handle(mask)?.0;
        *out_ptr(width)? = m.width;
        *out_ptr(height)? = m.height;
        Ok(())
    })
}

/// Copy the mask as row-major bytes (0 or 1).
///
/// # Safety
/// `out` must have room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dys_mask_data(mask: *const DysMask, out: *mut u8, len: usize) -> DysStatus {
    guard(|| {
        let m = &handle(mask)?.0;
        if len < m.data.len() {
            return Err(fail(DysStatus::BufferTooSmall, format!("need {} bytes", m.data.len())));
        }
        for (o, &v) in slice_out(out, m.data.len())?.iter_mut().zip(&m.data) {
            *o = v as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `mask` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dys_mask_free(mask: *mut DysMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Estimate the H and E optical-density vectors of an interleaved RGB image.
/// `out` receives `[h_r, h_g, h_b, e_r, e_g, e_b]`.
///
/// # Safety
/// `rgb` must hold `width · height · 3` bytes and `out` six doubles.
#[no_mangle]
pub unsafe extern "C" fn dys_stain_estimate(
    rgb: *const u8,
    width: u32,
    height: u32,
    beta: f64,
    alpha: f64,
    out: *mut f64,
) -> DysStatus {
    guard(|| {
        let data = slice_in(rgb, width as usize * height as usize * 3)?;
        let img = rgb_image(data, width, height)?;
        let m = lib(estimate_stain_matrix(&img, beta, alpha))?;
        slice_out(out, 6)?.copy_from_slice(&m.to_array());
        Ok(())
    })
}

/// Tiles covering a canvas. Writes up to `cap` top-left corners into `xs` and
/// `ys` and the full tile count into `count`; pass `cap` 0 to query the count.
///
/// # Safety
/// `xs` and `ys` must have room for `cap` entries; `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dys_tessellate(
    width: usize,
    height: usize,
    patch: usize,
    overlap: usize,
    xs: *mut usize,
    ys: *mut usize,
    cap: usize,
    count: *mut usize,
) -> DysStatus {
    guard(|| {
        let tiles = lib(tessellate(width, height, patch, overlap, 1.0))?;
        *out_ptr(count)? = tiles.len();
        if cap == 0 {
            return Ok(());
        }
        if cap < tiles.len() {
            return Err(fail(DysStatus::BufferTooSmall, format!("need {} entries", tiles.len())));
        }
        let (xs, ys) = (slice_out(xs, tiles.len())?, slice_out(ys, tiles.len())?);
        for (i, t) in tiles.iter().enumerate() {
            xs[i] = t.x;
            ys[i] = t.y;
        }
        Ok(())
    })
}

/// Case-ROI precision, recall and F1 (0 for empty denominators).
///
/// # Safety
/// `out` must hold three doubles: F1, recall, precision.
#[no_mangle]
pub unsafe extern "C" fn dys_case_metrics(tp: u64, fp: u64, fn_: u64, out: *mut f64) -> DysStatus {
    guard(|| {
        let m = case_metrics(&RoiConfusion {
            slide: String::new(),
            roi: 1,
            class: SlideClass::Case,
            tp,
            fp,
            fn_,
            tn: 0,
        });
        slice_out(out, 3)?.copy_from_slice(&[m.f1, m.recall, m.precision]);
        Ok(())
    })
}

/// Control-ROI specificity `tn / (tn + fp)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dys_control_specificity(fp: u64, tn: u64, out: *mut f64) -> DysStatus {
    guard(|| {
        let s = lib(control_specificity(&RoiConfusion {
            slide: String::new(),
            roi: 1,
            class: SlideClass::Control,
            tp: 0,
            fp,
            fn_: 0,
            tn,
        }))?;
        *out_ptr(out)? = s;
        Ok(())
    })
}
