//! C ABI for `cabs-core`.
//!
//! Conventions:
//! - every fallible function returns a [`CabsStatus`]; on failure the message
//!   is available from [`cabs_last_error_message`] on the same thread;
//! - handles are opaque and must be released with their `_free` function;
//! - strings returned through `char **` out-parameters are owned by the caller
//!   and released with [`cabs_string_free`];
//! - masks cross the boundary as one byte per element, 0 or 1.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cabs_core::analysis::overlap_rate;
use cabs_core::conflict::{ca_sequential, FillMode};
use cabs_core::pruning::{prune_balanced_nm, prune_magnitude_layer, Granularity};
use cabs_core::{BitMask, Checkpoint, Error, MergeRecipe, Tensor};

/// Status codes. Values 2..=5 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CabsStatus {
    Ok = 0,
    Validation = 2,
    Io = 3,
    Evaluator = 4,
    Invariant = 5,
    NullArgument = 10,
    InvalidUtf8 = 11,
    BufferSize = 12,
    Panic = 13,
}

/// An open checkpoint.
pub struct CabsCheckpoint {
    inner: Checkpoint,
    names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(err: Error) -> CabsStatus {
    let status = match err.exit_code() {
        2 => CabsStatus::Validation,
        3 => CabsStatus::Io,
        4 => CabsStatus::Evaluator,
        _ => CabsStatus::Invariant,
    };
    set_error(err.to_string());
    status
}

fn guard(f: impl FnOnce() -> CabsStatus) -> CabsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            CabsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, CabsStatus> {
    if p.is_null() {
        set_error("null string argument");
        return Err(CabsStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        CabsStatus::InvalidUtf8
    })
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize) -> Result<&'a [T], CabsStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        set_error("null buffer argument");
        return Err(CabsStatus::NullArgument);
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize) -> Result<&'a mut [T], CabsStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        set_error("null output buffer");
        return Err(CabsStatus::NullArgument);
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn write_mask(mask: &BitMask, out: &mut [u8]) {
    for (i, b) in out.iter_mut().enumerate() {
        *b = mask.get(i) as u8;
    }
}

unsafe fn give_string(s: String, out: *mut *mut c_char) -> CabsStatus {
    if out.is_null() {
        set_error("null output pointer");
        return CabsStatus::NullArgument;
    }
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            CabsStatus::Ok
        }
        Err(_) => {
            set_error("string contains NUL");
            CabsStatus::Invariant
        }
    }
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cabs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a pointer obtained from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn cabs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Open a safetensors checkpoint. Only the header is read.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cabs_checkpoint_open(path: *const c_char, out: *mut *mut CabsCheckpoint) -> CabsStatus {
    guard(|| {
        let path = tri!(str_arg(path));
        if out.is_null() {
            set_error("null output pointer");
            return CabsStatus::NullArgument;
        }
        match Checkpoint::open(path) {
            Ok(inner) => {
                let names = inner
                    .metas()
                    .iter()
                    .map(|m| CString::new(m.name.as_str()).unwrap_or_default())
                    .collect();
                *out = Box::into_raw(Box::new(CabsCheckpoint { inner, names }));
                CabsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `ckpt` must be NULL or a handle from [`cabs_checkpoint_open`], freed once.
#[no_mangle]
pub unsafe extern "C" fn cabs_checkpoint_free(ckpt: *mut CabsCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Number of tensors, or 0 for a NULL handle.
///
/// # Safety
/// `ckpt` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cabs_checkpoint_tensor_count(ckpt: *const CabsCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.names.len())
}

/// Name of tensor `index` in header order. The string is owned by the handle.
///
/// # Safety
/// `ckpt` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cabs_checkpoint_tensor_name(
    ckpt: *const CabsCheckpoint,
    index: usize,
    out: *mut *const c_char,
) -> CabsStatus {
    guard(|| {
        let Some(c) = ckpt.as_ref() else {
            set_error("null checkpoint");
            return CabsStatus::NullArgument;
        };
        if out.is_null() {
            set_error("null output pointer");
            return CabsStatus::NullArgument;
        }
        match c.names.get(index) {
            Some(name) => {
                *out = name.as_ptr();
                CabsStatus::Ok
            }
            None => {
                set_error(format!("tensor index {index} out of range {}", c.names.len()));
                CabsStatus::Validation
            }
        }
    })
}

/// Element count of a tensor.
///
/// # Safety
/// `ckpt` must be a live handle, `name` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cabs_checkpoint_tensor_numel(
    ckpt: *const CabsCheckpoint,
    name: *const c_char,
    out: *mut usize,
) -> CabsStatus {
    guard(|| {
        let Some(c) = ckpt.as_ref() else {
            set_error("null checkpoint");
            return CabsStatus::NullArgument;
        };
        let name = tri!(str_arg(name));
        if out.is_null() {
            set_error("null output pointer");
            return CabsStatus::NullArgument;
        }
        match c.inner.meta(name) {
            Ok(m) => {
                *out = m.numel();
                CabsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Read a floating tensor widened to F32 into `out[0..len]`; `len` must equal
/// the element count.
///
/// # Safety
/// `ckpt` must be a live handle, `name` NUL-terminated, `out` valid for `len`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn cabs_checkpoint_read_f32(
    ckpt: *const CabsCheckpoint,
    name: *const c_char,
    out: *mut f32,
    len: usize,
) -> CabsStatus {
    guard(|| {
        let Some(c) = ckpt.as_ref() else {
            set_error("null checkpoint");
            return CabsStatus::NullArgument;
        };
        let name = tri!(str_arg(name));
        let tensor = match c.inner.read_tensor(name) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        if tensor.len() != len {
            set_error(format!("buffer holds {len} floats, tensor has {}", tensor.len()));
            return CabsStatus::BufferSize;
        }
        let dst = tri!(slice_out(out, len));
        dst.copy_from_slice(tensor.data());
        CabsStatus::Ok
    })
}

/// Validate a recipe given as JSON text. Writes a JSON array of violation
/// strings (empty when valid) to `violations_json`. Returns `Validation` if
/// the text is not a recipe at all.
///
/// # Safety
/// `recipe_json` must be NUL-terminated; `violations_json` writable.
#[no_mangle]
pub unsafe extern "C" fn cabs_recipe_validate(
    recipe_json: *const c_char,
    violations_json: *mut *mut c_char,
) -> CabsStatus {
    guard(|| {
        let text = tri!(str_arg(recipe_json));
        match MergeRecipe::from_json(text) {
            Ok(r) => give_string(serde_json::to_string(&r.validate()).expect("strings"), violations_json),
            Err(e) => fail(e),
        }
    })
}

/// Run a merge recipe file. On success writes the run report JSON to
/// `report_json` (may be NULL to discard it).
///
/// # Safety
/// `path` must be NUL-terminated; `report_json` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn cabs_run_recipe_file(path: *const c_char, report_json: *mut *mut c_char) -> CabsStatus {
    guard(|| {
        let path = tri!(str_arg(path));
        let report = match MergeRecipe::load(path).and_then(|r| cabs_core::engine::run_recipe(&r)) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        if report_json.is_null() {
            return CabsStatus::Ok;
        }
        give_string(serde_json::to_string(&report).expect("report serializes"), report_json)
    })
}

/// Balanced n:m mask. Blocks run along rows of length `row_len` (pass `len`
/// for a flat tensor).
///
/// # Safety
/// `values` valid for `len` floats, `mask_out` for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cabs_prune_nm(
    values: *const f32,
    len: usize,
    row_len: usize,
    n: usize,
    m: usize,
    mask_out: *mut u8,
) -> CabsStatus {
    guard(|| {
        let values = tri!(slice_arg(values, len));
        let out = tri!(slice_out(mask_out, len));
        let shape = tri!(shape_of(len, row_len));
        match prune_balanced_nm(values, &shape, n, m) {
            Ok(mask) => {
                write_mask(&mask, out);
                CabsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Layer-wise magnitude mask keeping `ceil(keep_fraction * len)` entries.
///
/// # Safety
/// `values` valid for `len` floats, `mask_out` for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cabs_prune_magnitude(
    values: *const f32,
    len: usize,
    keep_fraction: f64,
    mask_out: *mut u8,
) -> CabsStatus {
    guard(|| {
        let values = tri!(slice_arg(values, len));
        let out = tri!(slice_out(mask_out, len));
        match prune_magnitude_layer(values, keep_fraction) {
            Ok(mask) => {
                write_mask(&mask, out);
                CabsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Conflict-aware n:m masks for `count` vectors of `len` elements each,
/// pruned in array order. `vectors[i]` and `masks_out[i]` point to the i-th
/// input and output buffer.
///
/// # Safety
/// `vectors` and `masks_out` valid for `count` pointers, each valid for `len`
/// elements.
#[no_mangle]
pub unsafe extern "C" fn cabs_ca_nm(
    vectors: *const *const f32,
    count: usize,
    len: usize,
    row_len: usize,
    n: usize,
    m: usize,
    masks_out: *const *mut u8,
) -> CabsStatus {
    guard(|| {
        let inputs = tri!(slice_arg(vectors, count));
        let outputs = tri!(slice_arg(masks_out, count));
        let shape = tri!(shape_of(len, row_len));
        let mut tensors = Vec::with_capacity(count);
        for &p in inputs {
            let data = tri!(slice_arg(p, len));
            tensors.push(Tensor::new(shape.clone(), data.to_vec()));
        }
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let order: Vec<usize> = (0..count).collect();
        let masks = match ca_sequential("<ffi>", &refs, Granularity::Blocks { n, m }, &order, FillMode::PerBlock) {
            Ok(m) => m,
            Err(e) => return fail(e),
        };
        for (mask, &dst) in masks.iter().zip(outputs) {
            let out = tri!(slice_out(dst, len));
            write_mask(mask, out);
        }
        CabsStatus::Ok
    })
}

/// Overlap rate of byte mask `a` against `b`: shared / kept(a).
///
/// # Safety
/// `a`, `b` valid for `len` bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cabs_overlap_rate(a: *const u8, b: *const u8, len: usize, out: *mut f64) -> CabsStatus {
    guard(|| {
        let a = tri!(slice_arg(a, len));
        let b = tri!(slice_arg(b, len));
        if out.is_null() {
            set_error("null output pointer");
            return CabsStatus::NullArgument;
        }
        let ma = BitMask::from_bools(&a.iter().map(|&x| x != 0).collect::<Vec<_>>());
        let mb = BitMask::from_bools(&b.iter().map(|&x| x != 0).collect::<Vec<_>>());
        match overlap_rate(&ma, &mb) {
            Ok(r) => {
                *out = r.rate;
                CabsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

fn shape_of(len: usize, row_len: usize) -> Result<Vec<usize>, CabsStatus> {
    if row_len == 0 || !len.is_multiple_of(row_len) {
        set_error(format!("row length {row_len} does not divide {len}"));
        return Err(CabsStatus::Validation);
    }
    Ok(vec![len / row_len, row_len])
}
