//! C ABI for the nowcasting toolkit: opaque handles, integer status codes,
//! and a thread-local last-error message. The generated header lands in
//! `include/nowcast.h`.
//!
//! Ownership rules: every `*_new`/`*_read`/`*_load`/`*_predict` output must
//! be released with the matching `*_free`; input pointers are borrowed.

use nowcast::binning::{NUM_BINS, NUM_THRESHOLDS};
use nowcast::dataio::{read_tensor, write_tensor};
use nowcast::metrics::evaluate;
use nowcast::model::{load_checkpoint, predict, ModelState};
use nowcast::{RainBins, Tensor};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

/// Status code returned by every fallible call. `NC_OK` is zero; anything
/// else leaves a message readable through `nc_last_error`.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum NcStatus {
    NcOk = 0,
    /// A required pointer argument was null.
    NcNullArgument = 1,
    /// Argument outside its documented domain.
    NcInvalidArgument = 2,
    /// Filesystem failure.
    NcIoError = 3,
    /// File exists but is not a valid tensor or checkpoint.
    NcFormatError = 4,
    /// Tensor shapes do not fit the requested operation.
    NcShapeError = 5,
    /// Any other failure from the underlying library.
    NcInternalError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(status: NcStatus, message: &str) -> NcStatus {
    let sanitized: Vec<u8> = message.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul bytes removed");
    });
    status
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
}

/// Message describing the most recent failure on this thread. Valid until
/// the next failing call on the same thread; never null.
#[no_mangle]
pub extern "C" fn nc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opaque rank-n f32 tensor handle.
pub struct NcTensor {
    inner: Tensor,
}

/// Opaque trained-model handle.
pub struct NcModel {
    inner: ModelState,
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, NcStatus> {
    if ptr.is_null() {
        return Err(set_error(NcStatus::NcNullArgument, "path is null"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(set_error(NcStatus::NcInvalidArgument, "path is not UTF-8")),
    }
}

fn data_status(e: &nowcast::dataio::DataError) -> NcStatus {
    match e {
        nowcast::dataio::DataError::Io { .. } => NcStatus::NcIoError,
        _ => NcStatus::NcFormatError,
    }
}

/// Builds a tensor from a dims array and row-major data. `data` must hold
/// the product of `dims` floats.
///
/// # Safety
/// `dims` must point to `rank` elements, `data` to their product, and `out`
/// must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn nc_tensor_create(
    dims: *const usize,
    rank: usize,
    data: *const f32,
    out: *mut *mut NcTensor,
) -> NcStatus {
    if dims.is_null() || data.is_null() || out.is_null() {
        return set_error(NcStatus::NcNullArgument, "dims, data and out must be non-null");
    }
    if rank == 0 {
        return set_error(NcStatus::NcInvalidArgument, "rank must be at least 1");
    }
    let shape: Vec<usize> = std::slice::from_raw_parts(dims, rank).to_vec();
    let len: usize = shape.iter().product();
    let values = std::slice::from_raw_parts(data, len).to_vec();
    clear_error();
    *out = Box::into_raw(Box::new(NcTensor { inner: Tensor::new(shape, values) }));
    NcStatus::NcOk
}

/// Reads a tensor file.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn nc_tensor_read(path: *const c_char, out: *mut *mut NcTensor) -> NcStatus {
    if out.is_null() {
        return set_error(NcStatus::NcNullArgument, "out is null");
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match read_tensor(path) {
        Ok(t) => {
            clear_error();
            *out = Box::into_raw(Box::new(NcTensor { inner: t }));
            NcStatus::NcOk
        }
        Err(e) => set_error(data_status(&e), &e.to_string()),
    }
}

/// Writes a tensor file.
///
/// # Safety
/// `path` must be a valid C string and `t` a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn nc_tensor_write(path: *const c_char, t: *const NcTensor) -> NcStatus {
    if t.is_null() {
        return set_error(NcStatus::NcNullArgument, "tensor is null");
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match write_tensor(path, &(*t).inner) {
        Ok(()) => {
            clear_error();
            NcStatus::NcOk
        }
        Err(e) => set_error(data_status(&e), &e.to_string()),
    }
}

/// Number of axes.
///
/// # Safety
/// `t` must be a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn nc_tensor_rank(t: *const NcTensor) -> usize {
    if t.is_null() {
        return 0;
    }
    (*t).inner.rank()
}

/// Copies the axis lengths into `dims`, which must hold `nc_tensor_rank`
/// entries.
///
/// # Safety
/// `t` must be a live tensor handle and `dims` sized to its rank.
#[no_mangle]
pub unsafe extern "C" fn nc_tensor_dims(t: *const NcTensor, dims: *mut usize) -> NcStatus {
    if t.is_null() || dims.is_null() {
        return set_error(NcStatus::NcNullArgument, "tensor and dims must be non-null");
    }
    let shape = (*t).inner.shape();
    std::slice::from_raw_parts_mut(dims, shape.len()).copy_from_slice(shape);
    clear_error();
    NcStatus::NcOk
}

/// Total element count.
///
/// # Safety
/// `t` must be a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn nc_tensor_len(t: *const NcTensor) -> usize {
    if t.is_null() {
        return 0;
    }
    (*t).inner.len()
}

/// Borrowed pointer to the row-major payload; valid while the handle lives.
///
/// # Safety
/// `t` must be a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn nc_tensor_data(t: *const NcTensor) -> *const f32 {
    if t.is_null() {
        return ptr::null();
    }
    (*t).inner.data().as_ptr()
}

/// Releases a tensor handle. Null is a no-op.
///
/// # Safety
/// `t` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn nc_tensor_free(t: *mut NcTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of rainfall bins (6).
#[no_mangle]
pub extern "C" fn nc_num_bins() -> usize {
    NUM_BINS
}

/// Number of exceedance thresholds (5).
#[no_mangle]
pub extern "C" fn nc_num_thresholds() -> usize {
    NUM_THRESHOLDS
}

/// Bin index of a rain rate under the default thresholds.
///
/// # Safety
/// `bin_out` must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn nc_quantize(rate: f32, bin_out: *mut usize) -> NcStatus {
    if bin_out.is_null() {
        return set_error(NcStatus::NcNullArgument, "bin_out is null");
    }
    match RainBins::default().quantize(rate) {
        Ok(bin) => {
            clear_error();
            *bin_out = bin;
            NcStatus::NcOk
        }
        Err(e) => set_error(NcStatus::NcInvalidArgument, &e.to_string()),
    }
}

/// Representative rain rate of a bin, or NaN for an out-of-range index.
#[no_mangle]
pub extern "C" fn nc_representative(bin: usize) -> f32 {
    match RainBins::default().representatives.get(bin) {
        Some(&r) => r,
        None => f32::NAN,
    }
}

/// 1 if the rate strictly exceeds threshold `index` (0..=4), else 0; also 0
/// for an out-of-range index.
#[no_mangle]
pub extern "C" fn nc_exceeds(rate: f32, index: usize) -> i32 {
    if index >= NUM_THRESHOLDS {
        return 0;
    }
    i32::from(RainBins::default().exceeds(rate, index))
}

/// Loads a checkpoint written by the `nowcast` trainer.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn nc_model_load(path: *const c_char, out: *mut *mut NcModel) -> NcStatus {
    if out.is_null() {
        return set_error(NcStatus::NcNullArgument, "out is null");
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_checkpoint(path) {
        Ok(state) => {
            clear_error();
            *out = Box::into_raw(Box::new(NcModel { inner: state }));
            NcStatus::NcOk
        }
        Err(nowcast::model::TrainError::Data(e)) => set_error(data_status(&e), &e.to_string()),
        Err(e) => set_error(NcStatus::NcFormatError, &e.to_string()),
    }
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `m` must have come from `nc_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn nc_model_free(m: *mut NcModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Runs the model on an input sequence tensor (frames, bands, h, w) and
/// returns the decoded rain-rate forecast (timesteps, h_out, w_out).
///
/// # Safety
/// `m` and `inputs` must be live handles, `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn nc_model_predict(
    m: *const NcModel,
    inputs: *const NcTensor,
    out: *mut *mut NcTensor,
) -> NcStatus {
    if m.is_null() || inputs.is_null() || out.is_null() {
        return set_error(NcStatus::NcNullArgument, "model, inputs and out must be non-null");
    }
    match predict(&(*m).inner, &(*inputs).inner, &RainBins::default()) {
        Ok(rates) => {
            clear_error();
            *out = Box::into_raw(Box::new(NcTensor { inner: rates }));
            NcStatus::NcOk
        }
        Err(e) => set_error(NcStatus::NcShapeError, &e.to_string()),
    }
}

/// Pools `count` prediction/truth tensor pairs into one confusion table.
/// `csi` and `f1` must hold `nc_num_thresholds` doubles each; any of the
/// output pointers may be null to skip that value.
///
/// # Safety
/// `preds` and `truths` must point to `count` live tensor handles; non-null
/// outputs must be sized as documented.
#[no_mangle]
pub unsafe extern "C" fn nc_score(
    preds: *const *const NcTensor,
    truths: *const *const NcTensor,
    count: usize,
    csi: *mut f64,
    f1: *mut f64,
    mcsi: *mut f64,
    mf1: *mut f64,
) -> NcStatus {
    if preds.is_null() || truths.is_null() {
        return set_error(NcStatus::NcNullArgument, "preds and truths must be non-null");
    }
    let p_handles = std::slice::from_raw_parts(preds, count);
    let t_handles = std::slice::from_raw_parts(truths, count);
    if p_handles.iter().chain(t_handles).any(|h| h.is_null()) {
        return set_error(NcStatus::NcNullArgument, "tensor handle is null");
    }
    let p: Vec<Tensor> = p_handles.iter().map(|&h| (*h).inner.clone()).collect();
    let t: Vec<Tensor> = t_handles.iter().map(|&h| (*h).inner.clone()).collect();
    match evaluate(&p, &t, &RainBins::default()) {
        Ok(report) => {
            clear_error();
            if !csi.is_null() {
                std::slice::from_raw_parts_mut(csi, NUM_THRESHOLDS)
                    .copy_from_slice(&report.csi);
            }
            if !f1.is_null() {
                std::slice::from_raw_parts_mut(f1, NUM_THRESHOLDS).copy_from_slice(&report.f1);
            }
            if !mcsi.is_null() {
                *mcsi = report.mcsi;
            }
            if !mf1.is_null() {
                *mf1 = report.mf1;
            }
            NcStatus::NcOk
        }
        Err(e) => set_error(NcStatus::NcShapeError, &e.to_string()),
    }
}
