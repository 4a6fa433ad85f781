//! C ABI for the cordseg pipeline.
//!
//! Conventions, mirrored in the generated `include/cordseg.h`:
//!
//! - Every fallible call returns [`CordsegStatus`]; `Ok` is 0 so the usual
//!   `if (cordseg_...(...))` error idiom works.
//! - On failure, [`cordseg_last_error`] returns a thread-local UTF-8
//!   message describing the most recent error on the calling thread. The
//!   pointer stays valid until the next failing call on that thread.
//! - Handles are opaque; release them with the matching `_free` function.
//!   `_free` accepts null (as a no-op) so cleanup paths need no guards.
//! - All buffers are caller-allocated, with dimensions passed explicitly
//!   and validated before anything is written.
//! - Panics never unwind across the boundary; they are caught and reported
//!   as [`CordsegStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use cordseg::dti::{fit_voxel, DiffusionSample};
use cordseg::io::{load_volume, segment_volume, Volume};
use cordseg::model::{load_checkpoint, SattisUnet};
use cordseg::morphometry::{slice_metrics, LabelVolume};
use cordseg::stats::{compare_correlations, fisher_z, pearson_r, CorrelationResult};
use cordseg::tensor::ParamStore;

/// Result of every fallible FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CordsegStatus {
    /// Success; output arguments are populated.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Inputs were rejected before any work ran (bad dimensions, malformed
    /// files, out-of-domain values).
    InvalidArgument = 2,
    /// The computation itself failed (non-finite loss, solver breakdown,
    /// or a caught panic).
    Internal = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let sanitized = CString::new(msg.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = sanitized);
}

fn status_of(err: &cordseg::Error) -> CordsegStatus {
    match err.exit_code() {
        2 => CordsegStatus::Internal,
        _ => CordsegStatus::InvalidArgument,
    }
}

fn fail(err: cordseg::Error) -> CordsegStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// Run `body` with panics converted into `Internal` status.
fn guarded<F: FnOnce() -> CordsegStatus>(body: F) -> CordsegStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic across FFI boundary".to_string());
            set_error(format!("internal panic: {msg}"));
            CordsegStatus::Internal
        }
    }
}

macro_rules! require {
    ($ptr:expr) => {
        if $ptr.is_null() {
            set_error(format!("{} must not be null", stringify!($ptr)));
            return CordsegStatus::NullPointer;
        }
    };
}

/// Message for the most recent failure on this thread; empty string when no
/// call has failed yet. Valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn cordseg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cordseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// --- model -----------------------------------------------------------------

/// Loaded segmentation network plus its parameters (opaque).
pub struct CordsegModel {
    model: SattisUnet,
    store: ParamStore<f32>,
}

/// Slices per forward pass during segmentation; bounds peak memory only.
const SEGMENT_BATCH: usize = 8;

/// Load a checkpoint written by `cordseg train`. On success `*out` owns the
/// model; release it with [`cordseg_model_free`].
#[no_mangle]
pub unsafe extern "C" fn cordseg_model_load(
    path: *const c_char,
    out: *mut *mut CordsegModel,
) -> CordsegStatus {
    require!(path);
    require!(out);
    guarded(|| {
        let path = match CStr::from_ptr(path).to_str() {
            Ok(p) => p,
            Err(_) => {
                set_error("checkpoint path is not valid UTF-8".to_string());
                return CordsegStatus::InvalidArgument;
            }
        };
        match load_checkpoint::<f32>(Path::new(path)) {
            Ok((model, store)) => {
                *out = Box::into_raw(Box::new(CordsegModel { model, store }));
                CordsegStatus::Ok
            }
            Err(e) => fail(e.into()),
        }
    })
}

/// Release a model handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn cordseg_model_free(model: *mut CordsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes the loaded model predicts.
#[no_mangle]
pub unsafe extern "C" fn cordseg_model_num_classes(
    model: *const CordsegModel,
    out: *mut usize,
) -> CordsegStatus {
    require!(model);
    require!(out);
    *out = (*model).model.config.num_classes;
    CordsegStatus::Ok
}

/// Segment an image volume. `image` holds `nz*ny*nx` f32 intensities in
/// Z-major order; `labels_out` receives the same number of label bytes.
#[no_mangle]
pub unsafe extern "C" fn cordseg_model_segment(
    model: *const CordsegModel,
    image: *const f32,
    nz: usize,
    ny: usize,
    nx: usize,
    labels_out: *mut u8,
) -> CordsegStatus {
    require!(model);
    require!(image);
    require!(labels_out);
    let n = nz * ny * nx;
    if n == 0 {
        set_error(format!("empty volume {nz}x{ny}x{nx}"));
        return CordsegStatus::InvalidArgument;
    }
    let handle = &*model;
    let data = slice::from_raw_parts(image, n).to_vec();
    guarded(move || {
        let volume = match Volume::scalars([nz, ny, nx], [1.0, 1.0, 1.0], data) {
            Ok(v) => v,
            Err(e) => return fail(e.into()),
        };
        match segment_volume(&handle.model, &handle.store, &volume, SEGMENT_BATCH) {
            Ok(labels) => match labels.as_u8() {
                Ok(bytes) => {
                    slice::from_raw_parts_mut(labels_out, n).copy_from_slice(bytes);
                    CordsegStatus::Ok
                }
                Err(e) => fail(e.into()),
            },
            Err(e) => fail(e),
        }
    })
}

/// Load an image volume from disk (`.raw` + JSON sidecar) and segment it,
/// writing the predicted labels next to `labels_path`.
#[no_mangle]
pub unsafe extern "C" fn cordseg_model_segment_file(
    model: *const CordsegModel,
    image_path: *const c_char,
    labels_path: *const c_char,
) -> CordsegStatus {
    require!(model);
    require!(image_path);
    require!(labels_path);
    let handle = &*model;
    let image_path = CStr::from_ptr(image_path).to_string_lossy().into_owned();
    let labels_path = CStr::from_ptr(labels_path).to_string_lossy().into_owned();
    guarded(move || {
        let image = match load_volume(Path::new(&image_path)) {
            Ok(v) => v,
            Err(e) => return fail(e.into()),
        };
        let labels = match segment_volume(&handle.model, &handle.store, &image, SEGMENT_BATCH) {
            Ok(l) => l,
            Err(e) => return fail(e),
        };
        match cordseg::io::save_volume(&labels, Path::new(&labels_path)) {
            Ok(()) => CordsegStatus::Ok,
            Err(e) => fail(e.into()),
        }
    })
}

// --- morphometry -----------------------------------------------------------

/// Cross-sectional metrics of one axial label slice. `labels` holds `ny*nx`
/// bytes (0 background, 1 CSF, 2..=8 cord at C1..C7); `dy`/`dx` are the
/// in-plane voxel extents in mm. `ratio_out` receives NaN when the slice
/// has no cord (the ratio is undefined, not zero).
#[no_mangle]
pub unsafe extern "C" fn cordseg_quantify_slice(
    labels: *const u8,
    ny: usize,
    nx: usize,
    dy: f64,
    dx: f64,
    csa_out: *mut f64,
    sac_out: *mut f64,
    ratio_out: *mut f64,
) -> CordsegStatus {
    require!(labels);
    require!(csa_out);
    require!(sac_out);
    require!(ratio_out);
    let data = slice::from_raw_parts(labels, ny * nx).to_vec();
    guarded(move || {
        let volume = match LabelVolume::new([1, ny, nx], [1.0, dy, dx], data) {
            Ok(v) => v,
            Err(e) => return fail(e.into()),
        };
        match slice_metrics(&volume, 0) {
            Ok(m) => {
                *csa_out = m.csa_mm2;
                *sac_out = m.sac_mm2;
                *ratio_out = m.ratio.unwrap_or(f64::NAN);
                CordsegStatus::Ok
            }
            Err(e) => fail(e.into()),
        }
    })
}

// --- diffusion -------------------------------------------------------------

/// Weighted-least-squares diffusion fit for one voxel. `bvals` holds `n`
/// b-values (s/mm^2), `dirs` holds `3n` unit-direction components
/// (x,y,z per sample), `signals` holds `n` positive measurements. Requires
/// n >= 7 spanning at least 6 distinct directions.
#[no_mangle]
pub unsafe extern "C" fn cordseg_dti_fit(
    bvals: *const f64,
    dirs: *const f64,
    signals: *const f64,
    n: usize,
    fa_out: *mut f64,
    md_out: *mut f64,
    rd_out: *mut f64,
) -> CordsegStatus {
    require!(bvals);
    require!(dirs);
    require!(signals);
    require!(fa_out);
    require!(md_out);
    require!(rd_out);
    let bvals = slice::from_raw_parts(bvals, n).to_vec();
    let dirs = slice::from_raw_parts(dirs, 3 * n).to_vec();
    let signals = slice::from_raw_parts(signals, n).to_vec();
    guarded(move || {
        let samples: Vec<DiffusionSample> = (0..n)
            .map(|i| DiffusionSample {
                b: bvals[i],
                dir: [dirs[3 * i], dirs[3 * i + 1], dirs[3 * i + 2]],
                signal: signals[i],
            })
            .collect();
        match fit_voxel(&samples) {
            Ok((_, m)) => {
                *fa_out = m.fa;
                *md_out = m.md;
                *rd_out = m.rd;
                CordsegStatus::Ok
            }
            Err(e) => fail(e.into()),
        }
    })
}

// --- statistics ------------------------------------------------------------

/// Pearson correlation of two length-`n` series.
#[no_mangle]
pub unsafe extern "C" fn cordseg_pearson(
    x: *const f64,
    y: *const f64,
    n: usize,
    r_out: *mut f64,
) -> CordsegStatus {
    require!(x);
    require!(y);
    require!(r_out);
    let x = slice::from_raw_parts(x, n).to_vec();
    let y = slice::from_raw_parts(y, n).to_vec();
    guarded(move || match pearson_r(&x, &y) {
        Ok(r) => {
            *r_out = r;
            CordsegStatus::Ok
        }
        Err(e) => fail(e.into()),
    })
}

/// Fisher z-transform `atanh(r)`; requires |r| < 1.
#[no_mangle]
pub unsafe extern "C" fn cordseg_fisher_z(r: f64, z_out: *mut f64) -> CordsegStatus {
    require!(z_out);
    guarded(move || match fisher_z(r) {
        Ok(z) => {
            *z_out = z;
            CordsegStatus::Ok
        }
        Err(e) => fail(e.into()),
    })
}

/// Two-sided Fisher z-test between two independent correlations. Both
/// groups need n > 3.
#[no_mangle]
pub unsafe extern "C" fn cordseg_compare_correlations(
    r_a: f64,
    n_a: usize,
    r_b: f64,
    n_b: usize,
    z_out: *mut f64,
    p_out: *mut f64,
) -> CordsegStatus {
    require!(z_out);
    require!(p_out);
    guarded(move || {
        let a = CorrelationResult {
            r: r_a,
            n: n_a,
            stratum: "a".to_string(),
        };
        let b = CorrelationResult {
            r: r_b,
            n: n_b,
            stratum: "b".to_string(),
        };
        match compare_correlations(&a, &b) {
            Ok(c) => {
                *z_out = c.z;
                *p_out = c.p;
                CordsegStatus::Ok
            }
            Err(e) => fail(e.into()),
        }
    })
}
