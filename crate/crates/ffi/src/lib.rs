//! C ABI over `convlower`.
//!
//! Tensors, filter banks and matrices cross the boundary as opaque handles
//! owned by the caller once returned and released with the matching `_free`.
//! Every fallible call returns a [`ConvlowerStatus`]; on failure the message
//! is available from [`convlower_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use convlower::engines::Engine;
use convlower::geometry::{ConvGeometry, Rounding};
use convlower::lowering::{lower, FilterBank, IndexMap};
use convlower::tensor::{Matrix2, Shape4, Tensor4};
use convlower::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvlowerStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    InvalidGeometry = 4,
    OutOfBounds = 5,
    Io = 6,
    Format = 7,
    NonFinite = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvlowerEngine {
    Direct = 0,
    True2d = 1,
    Gemm = 2,
    Lazy = 3,
}

fn engine_from_raw(raw: i32) -> Result<Engine, Error> {
    match raw {
        x if x == ConvlowerEngine::Direct as i32 => Ok(Engine::Direct),
        x if x == ConvlowerEngine::True2d as i32 => Ok(Engine::True2D),
        x if x == ConvlowerEngine::Gemm as i32 => Ok(Engine::Im2colGemm),
        x if x == ConvlowerEngine::Lazy as i32 => Ok(Engine::LazyGemm),
        other => Err(Error::InvalidConfig(format!("unknown engine {other}"))),
    }
}

/// Convolution geometry. `pad` zeros are added on every side; with
/// `truncate` set, a stride that does not divide the span is floored.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvlowerGeometry {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub filters: usize,
    pub stride: usize,
    pub pad: usize,
    pub truncate: bool,
}

impl ConvlowerGeometry {
    fn to_core(self) -> Result<ConvGeometry, Error> {
        let g = ConvGeometry::new(
            self.kh,
            self.kw,
            self.c_in,
            self.filters,
            self.stride,
            self.pad,
        )?;
        Ok(if self.truncate {
            g.with_rounding(Rounding::Truncate)
        } else {
            g
        })
    }
}

/// NHWC `f64` tensor.
pub struct ConvlowerTensor(Tensor4);

/// Filter bank laid out `(f, kh, kw, c_in)`.
pub struct ConvlowerFilters(FilterBank);

/// Row-major `f64` matrix.
pub struct ConvlowerMatrix(Matrix2);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nulls removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> ConvlowerStatus {
    match err {
        Error::IndexOutOfBounds { .. } => ConvlowerStatus::OutOfBounds,
        Error::ShapeMismatch(_) => ConvlowerStatus::ShapeMismatch,
        Error::InvalidGeometry(_)
        | Error::KernelTooLarge { .. }
        | Error::StrideRemainder { .. } => ConvlowerStatus::InvalidGeometry,
        Error::EmptyInput(_) | Error::InvalidConfig(_) | Error::DimensionOverflow(_) => {
            ConvlowerStatus::InvalidArgument
        }
        Error::NonFiniteGradient { .. } => ConvlowerStatus::NonFinite,
        Error::Io(_) => ConvlowerStatus::Io,
        Error::UnexpectedMagic { .. }
        | Error::TruncatedPayload { .. }
        | Error::MalformedDump(_)
        | Error::Json(_)
        | Error::Csv(_) => ConvlowerStatus::Format,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `body`, converting errors and panics into a status and a message.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> ConvlowerStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => ConvlowerStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            ConvlowerStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic".into());
            ConvlowerStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn values<'a>(data: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(Failure::Null("data"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn convlower_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn convlower_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `len` values into a new tensor of shape `(b, h, w, c)`.
///
/// # Safety
/// `data` must point to `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn convlower_tensor_new(
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut ConvlowerTensor,
) -> ConvlowerStatus {
    guard(|| {
        let t = Tensor4::new(Shape4::new(b, h, w, c), values(data, len)?.to_vec())?;
        emit(out, ConvlowerTensor(t))
    })
}

/// Loads an IDX image file or a tensor dump.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn convlower_tensor_load(
    path: *const c_char,
    out: *mut *mut ConvlowerTensor,
) -> ConvlowerStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidConfig("path is not UTF-8".into()))?;
        emit(
            out,
            ConvlowerTensor(convlower::cli::load_input(Path::new(path))?),
        )
    })
}

/// # Safety
/// `t` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn convlower_tensor_free(t: *mut ConvlowerTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Writes `(b, h, w, c)` into `shape`.
///
/// # Safety
/// `t` must be a live handle; `shape` must have room for 4 values.
#[no_mangle]
pub unsafe extern "C" fn convlower_tensor_shape(
    t: *const ConvlowerTensor,
    shape: *mut usize,
) -> ConvlowerStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        if shape.is_null() {
            return Err(Failure::Null("shape"));
        }
        let dims = t.0.shape().as_array();
        ptr::copy_nonoverlapping(dims.as_ptr(), shape, 4);
        Ok(())
    })
}

/// Borrowed view of the tensor's values; valid while the handle lives.
///
/// # Safety
/// `t` must be a live handle; `len` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn convlower_tensor_data(
    t: *const ConvlowerTensor,
    len: *mut usize,
) -> *const f64 {
    let Some(t) = t.as_ref() else {
        set_last_error("null pointer: tensor".into());
        return ptr::null();
    };
    if let Some(len) = len.as_mut() {
        *len = t.0.data().len();
    }
    t.0.data().as_ptr()
}

/// Copies `len` values into a new bank of `f` filters, each `(kh, kw, c_in)`.
///
/// # Safety
/// `data` must point to `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn convlower_filters_new(
    f: usize,
    kh: usize,
    kw: usize,
    c_in: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut ConvlowerFilters,
) -> ConvlowerStatus {
    guard(|| {
        let bank = FilterBank::new(f, kh, kw, c_in, values(data, len)?.to_vec())?;
        emit(out, ConvlowerFilters(bank))
    })
}

/// # Safety
/// `k` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn convlower_filters_free(k: *mut ConvlowerFilters) {
    if !k.is_null() {
        drop(Box::from_raw(k));
    }
}

/// # Safety
/// `m` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn convlower_matrix_free(m: *mut ConvlowerMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn convlower_matrix_dims(
    m: *const ConvlowerMatrix,
    rows: *mut usize,
    cols: *mut usize,
) -> ConvlowerStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        if rows.is_null() || cols.is_null() {
            return Err(Failure::Null("rows/cols"));
        }
        (*rows, *cols) = m.0.dims();
        Ok(())
    })
}

/// Borrowed row-major values; valid while the handle lives.
///
/// # Safety
/// `m` must be a live handle; `len` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn convlower_matrix_data(
    m: *const ConvlowerMatrix,
    len: *mut usize,
) -> *const f64 {
    let Some(m) = m.as_ref() else {
        set_last_error("null pointer: matrix".into());
        return ptr::null();
    };
    if let Some(len) = len.as_mut() {
        *len = m.0.data().len();
    }
    m.0.data().as_ptr()
}

/// Output height and width for an unpadded `h × w` input.
///
/// # Safety
/// `geom` must be readable; `h_out` and `w_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn convlower_output_shape(
    geom: *const ConvlowerGeometry,
    h: usize,
    w: usize,
    h_out: *mut usize,
    w_out: *mut usize,
) -> ConvlowerStatus {
    guard(|| {
        let g = deref(geom, "geometry")?.to_core()?;
        if h_out.is_null() || w_out.is_null() {
            return Err(Failure::Null("h_out/w_out"));
        }
        let s = g.output_shape(h, w)?;
        (*h_out, *w_out) = (s.h_out, s.w_out);
        Ok(())
    })
}

/// Patch matrix of `input`, one row per kernel position, padding applied
/// virtually.
///
/// # Safety
/// `input` and `geom` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn convlower_im2col(
    input: *const ConvlowerTensor,
    geom: *const ConvlowerGeometry,
    out: *mut *mut ConvlowerMatrix,
) -> ConvlowerStatus {
    guard(|| {
        let x = deref(input, "input")?;
        let g = deref(geom, "geometry")?.to_core()?;
        emit(out, ConvlowerMatrix(lower(&x.0, &g)?.into_matrix()))
    })
}

/// Cross-correlates `input` with `filters`; `True2d` flips each kernel first.
/// `engine` is a `ConvlowerEngine` value, taken as an integer so that an
/// out-of-range value is reported rather than undefined.
///
/// # Safety
/// `input`, `filters` and `geom` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn convlower_conv(
    input: *const ConvlowerTensor,
    filters: *const ConvlowerFilters,
    geom: *const ConvlowerGeometry,
    engine: i32,
    out: *mut *mut ConvlowerTensor,
) -> ConvlowerStatus {
    guard(|| {
        let x = deref(input, "input")?;
        let k = deref(filters, "filters")?;
        let g = deref(geom, "geometry")?.to_core()?;
        emit(
            out,
            ConvlowerTensor(engine_from_raw(engine)?.run(&x.0, &k.0, &g)?),
        )
    })
}

/// Source coordinates `(l, i, j, d)` of patch-matrix cell `(p, q)` for an
/// unpadded input of shape `(b, h, w, c_in)`. `i` and `j` index the padded
/// input, so border cells report positions below `pad` or past `h`/`w`.
///
/// # Safety
/// `geom` must be readable; `coords` must have room for 4 values.
#[no_mangle]
pub unsafe extern "C" fn convlower_index_map(
    geom: *const ConvlowerGeometry,
    b: usize,
    h: usize,
    w: usize,
    p: usize,
    q: usize,
    coords: *mut usize,
) -> ConvlowerStatus {
    guard(|| {
        let g = deref(geom, "geometry")?.to_core()?;
        if coords.is_null() {
            return Err(Failure::Null("coords"));
        }
        let map = IndexMap::for_unpadded(g, Shape4::new(b, h, w, g.c_in))?;
        let (l, i, j, d) = map.source_index(p, q)?;
        ptr::copy_nonoverlapping([l, i, j, d].as_ptr(), coords, 4);
        Ok(())
    })
}
