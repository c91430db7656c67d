//! C ABI over `merit`. Objects cross the boundary as opaque handles that
//! the caller frees; every fallible call returns a [`MeritStatus`] and
//! leaves a message for [`merit_last_error`].
#![allow(clippy::missing_safety_doc)]

use merit::engine::{run_full, run_tiled, TilingPlan, Workload};
use merit::interconnect::butterfly_route;
use merit::rip::StrategyProgram;
use merit::tensor::Tensor;
use merit::view::ViewSpec;
use merit::MeritError;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Result of every fallible call. Values are stable.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeritStatus {
    Ok = 0,
    OutOfRange = 1,
    BadMagic = 2,
    TruncatedPayload = 3,
    UnknownDtype = 4,
    NegativeStride = 5,
    LutRange = 6,
    DivByZero = 7,
    ScratchpadOverflow = 8,
    OutOfFootprint = 9,
    Indivisible = 10,
    UnknownTemplate = 11,
    BadParams = 12,
    InvalidPermutation = 13,
    InvalidProgram = 14,
    InvalidSpec = 15,
    ShapeMismatch = 16,
    InvalidTiling = 17,
    Io = 18,
    Json = 19,
    NullPointer = 20,
    InvalidUtf8 = 21,
    BufferTooSmall = 22,
    Panic = 23,
}

impl From<&MeritError> for MeritStatus {
    fn from(e: &MeritError) -> Self {
        match e {
            MeritError::OutOfRange { .. } => MeritStatus::OutOfRange,
            MeritError::BadMagic => MeritStatus::BadMagic,
            MeritError::TruncatedPayload { .. } => MeritStatus::TruncatedPayload,
            MeritError::UnknownDtype(_) => MeritStatus::UnknownDtype,
            MeritError::NegativeStride { .. } => MeritStatus::NegativeStride,
            MeritError::LutRange { .. } => MeritStatus::LutRange,
            MeritError::DivByZero => MeritStatus::DivByZero,
            MeritError::ScratchpadOverflow { .. } => MeritStatus::ScratchpadOverflow,
            MeritError::OutOfFootprint { .. } => MeritStatus::OutOfFootprint,
            MeritError::Indivisible { .. } => MeritStatus::Indivisible,
            MeritError::UnknownTemplate(_) => MeritStatus::UnknownTemplate,
            MeritError::BadParams(_) => MeritStatus::BadParams,
            MeritError::InvalidPermutation(_) => MeritStatus::InvalidPermutation,
            MeritError::InvalidProgram(_) => MeritStatus::InvalidProgram,
            MeritError::InvalidSpec(_) => MeritStatus::InvalidSpec,
            MeritError::ShapeMismatch(_) => MeritStatus::ShapeMismatch,
            MeritError::InvalidTiling(_) => MeritStatus::InvalidTiling,
            MeritError::Io(_) => MeritStatus::Io,
            MeritError::Json(_) => MeritStatus::Json,
        }
    }
}

/// Opaque tensor handle.
pub struct MeritTensor(Tensor);

/// Opaque workload handle: two sources, two views and a program.
pub struct MeritWorkload(Workload);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(MeritStatus, String);

impl From<MeritError> for Fail {
    fn from(e: MeritError) -> Self {
        Fail(MeritStatus::from(&e), format!("{} [{}]", e, e.code()))
    }
}

fn fail(status: MeritStatus, msg: &str) -> Fail {
    Fail(status, msg.to_string())
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MeritStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MeritStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MeritStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(MeritStatus::NullPointer, what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(MeritStatus::InvalidUtf8, what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(MeritStatus::NullPointer, what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(MeritStatus::NullPointer, what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| fail(MeritStatus::NullPointer, what))
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s).expect("JSON has no NUL bytes").into_raw()
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn merit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn merit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub unsafe extern "C" fn merit_tensor_from_f32(
    shape: *const usize,
    rank: usize,
    data: *const f32,
    len: usize,
    out: *mut *mut MeritTensor,
) -> MeritStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let shape = slice_arg(shape, rank, "shape")?.to_vec();
        let data = slice_arg(data, len, "data")?.to_vec();
        *out = Box::into_raw(Box::new(MeritTensor(Tensor::from_f32(shape, data)?)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn merit_tensor_from_fix16(
    shape: *const usize,
    rank: usize,
    frac_bits: u8,
    data: *const i16,
    len: usize,
    out: *mut *mut MeritTensor,
) -> MeritStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let shape = slice_arg(shape, rank, "shape")?.to_vec();
        let data = slice_arg(data, len, "data")?.to_vec();
        *out = Box::into_raw(Box::new(MeritTensor(Tensor::from_fix16(shape, frac_bits, data)?)));
        Ok(())
    })
}

/// Reads an MRT1 tensor file.
#[no_mangle]
pub unsafe extern "C" fn merit_tensor_read(path: *const c_char, out: *mut *mut MeritTensor) -> MeritStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t = Tensor::read_file(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(MeritTensor(t)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn merit_tensor_write(t: *const MeritTensor, path: *const c_char) -> MeritStatus {
    guard(|| {
        let t = ref_arg(t, "tensor")?;
        t.0.write_file(str_arg(path, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn merit_tensor_rank(t: *const MeritTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.rank())
}

#[no_mangle]
pub unsafe extern "C" fn merit_tensor_len(t: *const MeritTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// On-disk dtype code: 0 for REAL32, 1 for FIX16.
#[no_mangle]
pub unsafe extern "C" fn merit_tensor_dtype(t: *const MeritTensor) -> u8 {
    t.as_ref().map_or(0, |t| t.0.dtype().code())
}

/// Copies the shape into `out`, which holds `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn merit_tensor_shape(t: *const MeritTensor, out: *mut usize, cap: usize) -> MeritStatus {
    guard(|| {
        let t = ref_arg(t, "tensor")?;
        copy_out(t.0.shape(), out, cap)
    })
}

/// Copies the elements as real numbers (FIX16 is dequantized).
#[no_mangle]
pub unsafe extern "C" fn merit_tensor_values(t: *const MeritTensor, out: *mut f64, cap: usize) -> MeritStatus {
    guard(|| {
        let t = ref_arg(t, "tensor")?;
        copy_out(&t.0.to_f64_vec(), out, cap)
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], out: *mut T, cap: usize) -> Result<(), Fail> {
    if cap < src.len() {
        return Err(Fail(MeritStatus::BufferTooSmall, format!("need {} entries, have {cap}", src.len())));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(fail(MeritStatus::NullPointer, "out"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

#[no_mangle]
pub unsafe extern "C" fn merit_tensor_free(t: *mut MeritTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Footprint of a `(t_p, t_a)` tile under a view given as JSON. Writes one
/// extent per source axis into `per_axis` and the word count into `words`.
#[no_mangle]
pub unsafe extern "C" fn merit_view_footprint(
    view_json: *const c_char,
    t_p: *const usize,
    n_p: usize,
    t_a: *const usize,
    n_a: usize,
    per_axis: *mut usize,
    cap: usize,
    words: *mut u64,
) -> MeritStatus {
    guard(|| {
        let view = ViewSpec::from_json(str_arg(view_json, "view_json")?)?;
        let fp = view.footprint(slice_arg(t_p, n_p, "t_p")?, slice_arg(t_a, n_a, "t_a")?)?;
        copy_out(&fp.per_axis, per_axis, cap)?;
        *out_arg(words, "words")? = fp.words;
        Ok(())
    })
}

/// Builds a workload from a named template with random inputs.
#[no_mangle]
pub unsafe extern "C" fn merit_workload_from_template(
    name: *const c_char,
    params: *const c_char,
    seed: u64,
    out: *mut *mut MeritWorkload,
) -> MeritStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let params = if params.is_null() { "" } else { str_arg(params, "params")? };
        let w = merit::workloads::build(str_arg(name, "name")?, params, seed)?;
        *out = Box::into_raw(Box::new(MeritWorkload(w)));
        Ok(())
    })
}

/// Builds a workload from two tensors, two JSON views and a JSON program.
/// The tensors are copied; the caller still owns them.
#[no_mangle]
pub unsafe extern "C" fn merit_workload_new(
    src_a: *const MeritTensor,
    src_b: *const MeritTensor,
    view_a_json: *const c_char,
    view_b_json: *const c_char,
    program_json: *const c_char,
    out: *mut *mut MeritWorkload,
) -> MeritStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let w = Workload::new(
            ViewSpec::from_json(str_arg(view_a_json, "view_a_json")?)?,
            ViewSpec::from_json(str_arg(view_b_json, "view_b_json")?)?,
            ref_arg(src_a, "src_a")?.0.clone(),
            ref_arg(src_b, "src_b")?.0.clone(),
            StrategyProgram::from_json(str_arg(program_json, "program_json")?)?,
        )?;
        *out = Box::into_raw(Box::new(MeritWorkload(w)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn merit_workload_run_full(w: *const MeritWorkload, out: *mut *mut MeritTensor) -> MeritStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t = run_full(&ref_arg(w, "workload")?.0)?;
        *out = Box::into_raw(Box::new(MeritTensor(t)));
        Ok(())
    })
}

/// Tiled execution with unbounded scratchpads. `report_json`, when not
/// NULL, receives the traffic report; free it with [`merit_string_free`].
#[no_mangle]
pub unsafe extern "C" fn merit_workload_run_tiled(
    w: *const MeritWorkload,
    t_p: *const usize,
    n_p: usize,
    t_a: *const usize,
    n_a: usize,
    out: *mut *mut MeritTensor,
    report_json: *mut *mut c_char,
) -> MeritStatus {
    guard(|| {
        let w = ref_arg(w, "workload")?;
        let out = out_arg(out, "out")?;
        let plan = TilingPlan::unbounded(slice_arg(t_p, n_p, "t_p")?.to_vec(), slice_arg(t_a, n_a, "t_a")?.to_vec());
        let (t, report) = run_tiled(&w.0, &plan)?;
        *out = Box::into_raw(Box::new(MeritTensor(t)));
        if let Some(r) = report_json.as_mut() {
            *r = c_string(report.to_json());
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn merit_workload_free(w: *mut MeritWorkload) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Bank-conflict analysis of the address pattern `coeffs` over `banks`
/// banks. `addr_bits` of 0 picks the default. The JSON report goes to
/// `report_json`; `reducible` is set when the pattern (or its hash)
/// reduces to identity.
#[no_mangle]
pub unsafe extern "C" fn merit_banks_analyze(
    coeffs: *const u64,
    n: usize,
    banks: usize,
    addr_bits: usize,
    search_hash: bool,
    reducible: *mut bool,
    report_json: *mut *mut c_char,
) -> MeritStatus {
    guard(|| {
        let coeffs = slice_arg(coeffs, n, "coeffs")?;
        let bits = (addr_bits != 0).then_some(addr_bits);
        let (report, ok) = merit::cli::bank_report(coeffs, banks, bits, search_hash)?;
        *out_arg(reducible, "reducible")? = ok;
        if let Some(r) = report_json.as_mut() {
            *r = c_string(report.to_string());
        }
        Ok(())
    })
}

/// Whether the butterfly network can deliver bank line `perm[i]` to ALU `i`
/// for all `n` ALUs in one pass.
#[no_mangle]
pub unsafe extern "C" fn merit_route(n: usize, perm: *const usize, routed: *mut bool) -> MeritStatus {
    guard(|| {
        let r = butterfly_route(n, slice_arg(perm, n, "perm")?)?;
        *out_arg(routed, "routed")? = r.is_routed();
        Ok(())
    })
}

/// `macs / (in_words + out_words)`.
#[no_mangle]
pub unsafe extern "C" fn merit_reuse_rate(macs: f64, in_words: f64, out_words: f64, rate: *mut f64) -> MeritStatus {
    guard(|| {
        let v = merit::engine::reuse_rate(macs, in_words, out_words)?;
        *out_arg(rate, "rate")? = v;
        Ok(())
    })
}
