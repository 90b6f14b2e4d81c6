//! C ABI over `sgs-core`.
//!
//! Every fallible function returns an [`SgsStatus`]. On failure the message
//! is kept per thread and can be read with [`sgs_last_error_message`].
//! Scaling matrices are handed out as opaque [`SgsScaling`] pointers that the
//! caller releases with [`sgs_scaling_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use sgs_core::dependence::{
    alpha_beta_scaling, normalized_mi, spatial_dependence_mi, BinningConfig, JointHistogram,
    SpatialDependenceMatrix,
};
use sgs_core::optim::{OptimizerConfig, OptimizerKind};
use sgs_core::reparam::{standard_equivalence_run, standard_mask_sets, BranchMask, MaskFamily};
use sgs_core::scaling::{finalize, from_masks, k_transform, k_transform_value, ScalingMatrix};
use sgs_core::{KernelMatrix, SgsError, Tensor4};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    Io = 5,
    Panic = 6,
}

/// Opaque scaling matrix handle.
pub struct SgsScaling(ScalingMatrix);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &SgsError) -> SgsStatus {
    match e {
        SgsError::Shape(_) => SgsStatus::Shape,
        SgsError::Numeric(_) => SgsStatus::Numeric,
        SgsError::Io { .. } | SgsError::Format { .. } => SgsStatus::Io,
        _ => SgsStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Core(SgsError),
}

impl From<SgsError> for Failure {
    fn from(e: SgsError) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SgsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgsStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer passed as `{name}`"));
            SgsStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            SgsStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn c_str<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(SgsError::InvalidArgument(format!("`{name}` is not UTF-8"))))
}

unsafe fn hand_out(out: *mut *mut SgsScaling, g: ScalingMatrix) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(SgsScaling(g)));
    Ok(())
}

unsafe fn handle<'a>(h: *const SgsScaling) -> Result<&'a SgsScaling, Failure> {
    h.as_ref().ok_or(Failure::Null("scaling"))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sgs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn sgs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// 3x3 scaling with centre 1, edges `1/alpha`, corners `1/beta`, mean 1.
#[no_mangle]
pub unsafe extern "C" fn sgs_scaling_from_alpha_beta(alpha: f64, beta: f64, out: *mut *mut SgsScaling) -> SgsStatus {
    guard(|| hand_out(out, alpha_beta_scaling(alpha, beta)?))
}

/// Floors `values` (row-major `rows x cols`) at `epsilon_floor` and
/// normalizes to mean 1.
#[no_mangle]
pub unsafe extern "C" fn sgs_scaling_from_values(
    rows: usize,
    cols: usize,
    values: *const f64,
    epsilon_floor: f64,
    out: *mut *mut SgsScaling,
) -> SgsStatus {
    guard(|| {
        let v = input(values, rows * cols, "values")?;
        let m = KernelMatrix::new(rows, cols, v.to_vec())?;
        hand_out(out, finalize(&m, epsilon_floor)?)
    })
}

/// Scaling from a spatial dependence matrix `s` with entries in `[0, 1]`:
/// k-transform, floor, normalize.
#[no_mangle]
pub unsafe extern "C" fn sgs_scaling_from_dependence(
    rows: usize,
    cols: usize,
    s: *const f64,
    k: f64,
    epsilon_floor: f64,
    out: *mut *mut SgsScaling,
) -> SgsStatus {
    guard(|| {
        let v = input(s, rows * cols, "s")?;
        let dep = SpatialDependenceMatrix::new(KernelMatrix::new(rows, cols, v.to_vec())?)?;
        hand_out(out, finalize(&k_transform(&dep, k)?, epsilon_floor)?)
    })
}

/// Normalized coverage of `n_masks` binary masks stored back to back as
/// `n_masks * rows * cols` bytes (nonzero = set). When `raw_out` is not
/// NULL it receives the unnormalized coverage counts.
#[no_mangle]
pub unsafe extern "C" fn sgs_scaling_from_masks(
    rows: usize,
    cols: usize,
    n_masks: usize,
    masks: *const u8,
    raw_out: *mut f64,
    out: *mut *mut SgsScaling,
) -> SgsStatus {
    guard(|| {
        let plane = rows * cols;
        let bytes = input(masks, n_masks * plane, "masks")?;
        let set: Vec<BranchMask> = bytes
            .chunks(plane.max(1))
            .map(|c| BranchMask::new(rows, cols, c.iter().map(|&b| b != 0).collect()))
            .collect::<Result<_, _>>()?;
        let cov = from_masks(&set)?;
        if !raw_out.is_null() {
            output(raw_out, plane, "raw_out")?.copy_from_slice(cov.raw.values());
        }
        hand_out(out, cov.normalized)
    })
}

#[no_mangle]
pub unsafe extern "C" fn sgs_scaling_dims(h: *const SgsScaling, rows: *mut usize, cols: *mut usize) -> SgsStatus {
    guard(|| {
        let g = handle(h)?;
        if rows.is_null() || cols.is_null() {
            return Err(Failure::Null("rows/cols"));
        }
        *rows = g.0.rows();
        *cols = g.0.cols();
        Ok(())
    })
}

/// Copies the row-major values into `out`, which holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sgs_scaling_values(h: *const SgsScaling, out: *mut f64, len: usize) -> SgsStatus {
    guard(|| {
        let g = handle(h)?;
        let n = g.0.values().len();
        if len != n {
            return Err(SgsError::Shape(format!("buffer holds {len} values, scaling has {n}")).into());
        }
        output(out, n, "out")?.copy_from_slice(g.0.values());
        Ok(())
    })
}

/// Scales a `[c_out, c_in, rows, cols]` gradient in place.
#[no_mangle]
pub unsafe extern "C" fn sgs_scaling_apply(
    h: *const SgsScaling,
    grad: *mut f64,
    c_out: usize,
    c_in: usize,
    rows: usize,
    cols: usize,
) -> SgsStatus {
    guard(|| {
        let g = handle(h)?;
        let shape = [c_out, c_in, rows, cols];
        let buf = output(grad, shape.iter().product(), "grad")?;
        let mut t = Tensor4::from_vec(shape, buf.to_vec())?;
        t.broadcast_scale_in_place(g.0.matrix())?;
        buf.copy_from_slice(t.data());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sgs_scaling_free(h: *mut SgsScaling) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// `k s / ((k - 1) s + 1)`.
#[no_mangle]
pub extern "C" fn sgs_k_transform(s: f64, k: f64) -> f64 {
    k_transform_value(s, k)
}

/// Normalized mutual information of a `bins x bins` joint count table.
#[no_mangle]
pub unsafe extern "C" fn sgs_normalized_mi(bins: usize, counts: *const u64, out: *mut f64) -> SgsStatus {
    guard(|| {
        let c = input(counts, bins * bins, "counts")?;
        let joint = JointHistogram::from_counts(bins, c.to_vec())?;
        let v = normalized_mi(&joint)?;
        *output(out, 1, "out")?.first_mut().ok_or(Failure::Null("out"))? = v;
        Ok(())
    })
}

/// Per-displacement normalized MI over feature maps `[n, c, h, w]` for a
/// `kh x kw` kernel; writes `kh * kw` values to `out`.
#[no_mangle]
pub unsafe extern "C" fn sgs_dependence_mi(
    maps: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    bins: usize,
    out: *mut f64,
) -> SgsStatus {
    guard(|| {
        let shape = [n, c, h, w];
        let data = input(maps, shape.iter().product(), "maps")?;
        let t = Tensor4::from_vec(shape, data.to_vec())?;
        let s = spatial_dependence_mi(&[t], (kh, kw), &BinningConfig::with_bins(bins))?;
        output(out, kh * kw, "out")?.copy_from_slice(s.values());
        Ok(())
    })
}

/// Lockstep run of a masked branched conv against a single conv scaled by
/// the mask coverage. `family` is `acb`, `full_plus_center`,
/// `all_rectangles`, `full` or `random:<n>:<seed>`; `optimizer` is `sgd`,
/// `sgd_momentum`, `adam` or `adagrad`. `guaranteed` is set to 0 for
/// optimizers outside the linear family.
#[no_mangle]
pub unsafe extern "C" fn sgs_verify_equivalence(
    kernel_rows: usize,
    kernel_cols: usize,
    family: *const c_char,
    optimizer: *const c_char,
    steps: usize,
    seed: u64,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    max_divergence: *mut f64,
    guaranteed: *mut bool,
) -> SgsStatus {
    guard(|| {
        let family = c_str(family, "family")?;
        let optimizer = c_str(optimizer, "optimizer")?;
        if max_divergence.is_null() || guaranteed.is_null() {
            return Err(Failure::Null("max_divergence/guaranteed"));
        }
        let masks = standard_mask_sets((kernel_rows, kernel_cols), family.parse::<MaskFamily>()?)?;
        let kind: OptimizerKind = optimizer.parse()?;
        let cfg = OptimizerConfig::for_kind(kind, momentum, weight_decay);
        let report = standard_equivalence_run(&masks, cfg, lr, steps, seed)?;
        *max_divergence = report.max_divergence();
        *guaranteed = report.equivalence_guaranteed;
        Ok(())
    })
}
