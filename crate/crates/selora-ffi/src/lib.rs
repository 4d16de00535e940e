//! C ABI over the selora adapter: opaque handles, integer status codes, a
//! thread-local last-error message.
//!
//! The generated header lives at `include/selora.h`; regenerate it after
//! changing this surface with
//! `cbindgen --config cbindgen.toml --crate selora-ffi --output include/selora.h`.
//!
//! Conventions, mirrored in the header:
//! - All matrices cross the boundary as row-major `double` arrays with the
//!   dimensions passed alongside (or implied by the handle).
//! - Every function returns a [`SeloraStatus`]; output parameters are
//!   written only on `Ok`. On any other status,
//!   [`selora_last_error_message`] describes the failure until the next
//!   failing call on the same thread.
//! - A handle stays usable after a failed call; the only invalidating
//!   operation is [`selora_adapter_free`].
//! - Handles are not thread-safe. Share a handle across threads only under
//!   external synchronization.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use selora::adapter::SeLoRALinear;
use selora::matrix::Matrix2D;
use selora::rng::SeededRng;
use selora::Error;

/// Status code returned by every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeloraStatus {
    /// Success; output parameters are valid.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument was outside its valid range (bad rank, bad UTF-8 id, ...).
    InvalidArgument = 2,
    /// Array dimensions disagreed with the handle or with each other.
    ShapeMismatch = 3,
    /// Expansion was refused because the adapter sits at its rank cap.
    RankCapReached = 4,
    /// The library panicked; the handle may be in an inconsistent state
    /// and should be freed.
    Panic = 5,
}

/// Opaque adapter handle: one wrapped linear layer plus the RNG stream that
/// drives its expansions. Create with `selora_adapter_new`, destroy with
/// `selora_adapter_free`.
pub struct SeloraAdapter {
    inner: SeLoRALinear,
    rng: SeededRng,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: SeloraStatus, message: &str) -> SeloraStatus {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn fail_err(err: &Error) -> SeloraStatus {
    let status = match err {
        Error::ShapeMismatch { .. } => SeloraStatus::ShapeMismatch,
        Error::RankCapReached { .. } => SeloraStatus::RankCapReached,
        _ => SeloraStatus::InvalidArgument,
    };
    fail(status, &err.to_string())
}

fn guarded(f: impl FnOnce() -> SeloraStatus) -> SeloraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(SeloraStatus::Panic, "internal panic"),
    }
}

/// Message for the most recent non-`Ok` status on this thread, empty if
/// none. The pointer stays valid until the next failing call on the same
/// thread; copy the string if it must outlive that.
#[no_mangle]
pub extern "C" fn selora_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn selora_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Create a rank-1 adapter around a frozen `d_in x d_out` base weight and a
/// `d_out`-vector bias. `seed` fixes both the factor initialization and the
/// handle's expansion stream: equal inputs give bit-identical adapters.
///
/// # Safety
/// `layer_id` must be a NUL-terminated string; `w0` must point to
/// `d_in * d_out` doubles and `b0` to `d_out` doubles; `out` must be a valid
/// destination for one pointer.
#[no_mangle]
pub unsafe extern "C" fn selora_adapter_new(
    layer_id: *const c_char,
    w0: *const f64,
    b0: *const f64,
    d_in: usize,
    d_out: usize,
    seed: u64,
    out: *mut *mut SeloraAdapter,
) -> SeloraStatus {
    guarded(|| {
        if layer_id.is_null() || w0.is_null() || b0.is_null() || out.is_null() {
            return fail(SeloraStatus::NullArgument, "selora_adapter_new: null argument");
        }
        if d_in == 0 || d_out == 0 {
            return fail(
                SeloraStatus::InvalidArgument,
                "selora_adapter_new: dimensions must be positive",
            );
        }
        let id = match unsafe { CStr::from_ptr(layer_id) }.to_str() {
            Ok(s) => s.to_owned(),
            Err(_) => {
                return fail(
                    SeloraStatus::InvalidArgument,
                    "selora_adapter_new: layer_id is not valid UTF-8",
                )
            }
        };
        let w0 = unsafe { std::slice::from_raw_parts(w0, d_in * d_out) };
        let b0 = unsafe { std::slice::from_raw_parts(b0, d_out) };
        let w0 = match Matrix2D::from_vec(d_in, d_out, w0.to_vec()) {
            Ok(m) => m,
            Err(e) => return fail_err(&e),
        };
        let b0 = match Matrix2D::from_vec(1, d_out, b0.to_vec()) {
            Ok(m) => m,
            Err(e) => return fail_err(&e),
        };
        let mut rng = SeededRng::new(seed);
        match SeLoRALinear::new(id, w0, b0, &mut rng) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(SeloraAdapter { inner, rng })) };
                SeloraStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Destroy a handle. A null pointer is a no-op.
///
/// # Safety
/// `adapter` must be null or a pointer from `selora_adapter_new` that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn selora_adapter_free(adapter: *mut SeloraAdapter) {
    if !adapter.is_null() {
        drop(unsafe { Box::from_raw(adapter) });
    }
}

unsafe fn borrow<'a>(
    adapter: *const SeloraAdapter,
    ctx: &str,
) -> std::result::Result<&'a SeloraAdapter, SeloraStatus> {
    if adapter.is_null() {
        Err(fail(
            SeloraStatus::NullArgument,
            &format!("{ctx}: null adapter"),
        ))
    } else {
        Ok(unsafe { &*adapter })
    }
}

/// Current rank.
///
/// # Safety
/// `adapter` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selora_adapter_rank(
    adapter: *const SeloraAdapter,
    out: *mut usize,
) -> SeloraStatus {
    guarded(|| {
        let handle = match unsafe { borrow(adapter, "selora_adapter_rank") } {
            Ok(h) => h,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(SeloraStatus::NullArgument, "selora_adapter_rank: null out");
        }
        unsafe { *out = handle.inner.rank() };
        SeloraStatus::Ok
    })
}

/// Input and output widths of the wrapped layer.
///
/// # Safety
/// `adapter` must be a live handle; `d_in` and `d_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selora_adapter_dims(
    adapter: *const SeloraAdapter,
    d_in: *mut usize,
    d_out: *mut usize,
) -> SeloraStatus {
    guarded(|| {
        let handle = match unsafe { borrow(adapter, "selora_adapter_dims") } {
            Ok(h) => h,
            Err(s) => return s,
        };
        if d_in.is_null() || d_out.is_null() {
            return fail(SeloraStatus::NullArgument, "selora_adapter_dims: null out");
        }
        unsafe {
            *d_in = handle.inner.d_in();
            *d_out = handle.inner.d_out();
        }
        SeloraStatus::Ok
    })
}

/// Number of trainable scalars, `rank * (d_in + d_out)`.
///
/// # Safety
/// `adapter` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selora_adapter_trainable_params(
    adapter: *const SeloraAdapter,
    out: *mut usize,
) -> SeloraStatus {
    guarded(|| {
        let handle = match unsafe { borrow(adapter, "selora_adapter_trainable_params") } {
            Ok(h) => h,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(
                SeloraStatus::NullArgument,
                "selora_adapter_trainable_params: null out",
            );
        }
        unsafe { *out = handle.inner.trainable_param_count() };
        SeloraStatus::Ok
    })
}

/// Cap the rank. Expansion attempts at the cap return `RankCapReached`.
/// Rejects caps below the current rank.
///
/// # Safety
/// `adapter` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn selora_adapter_set_max_rank(
    adapter: *mut SeloraAdapter,
    max_rank: usize,
) -> SeloraStatus {
    guarded(|| {
        if adapter.is_null() {
            return fail(
                SeloraStatus::NullArgument,
                "selora_adapter_set_max_rank: null adapter",
            );
        }
        let handle = unsafe { &mut *adapter };
        match handle.inner.set_max_rank(max_rank) {
            Ok(()) => SeloraStatus::Ok,
            Err(e) => fail_err(&e),
        }
    })
}

/// Apply the adapted layer to `n_rows` input rows: writes
/// `x W0 + (x A) B + b0`, an `n_rows x d_out` row-major array, into `out`.
///
/// # Safety
/// `adapter` must be a live handle; `x` must point to `n_rows * d_in`
/// doubles and `out` to `n_rows * d_out` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn selora_adapter_forward(
    adapter: *const SeloraAdapter,
    x: *const f64,
    n_rows: usize,
    out: *mut f64,
) -> SeloraStatus {
    guarded(|| {
        let handle = match unsafe { borrow(adapter, "selora_adapter_forward") } {
            Ok(h) => h,
            Err(s) => return s,
        };
        if x.is_null() || out.is_null() {
            return fail(
                SeloraStatus::NullArgument,
                "selora_adapter_forward: null buffer",
            );
        }
        if n_rows == 0 {
            return fail(
                SeloraStatus::InvalidArgument,
                "selora_adapter_forward: n_rows must be positive",
            );
        }
        let d_in = handle.inner.d_in();
        let d_out = handle.inner.d_out();
        let x = unsafe { std::slice::from_raw_parts(x, n_rows * d_in) };
        let x = match Matrix2D::from_vec(n_rows, d_in, x.to_vec()) {
            Ok(m) => m,
            Err(e) => return fail_err(&e),
        };
        match handle.inner.forward(&x) {
            Ok(y) => {
                let dst = unsafe { std::slice::from_raw_parts_mut(out, n_rows * d_out) };
                dst.copy_from_slice(y.data());
                SeloraStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Grow the rank by one: a fresh Kaiming column on A, a zero row on B, so
/// the layer's function is unchanged. Draws from the handle's seeded stream;
/// the new rank is written to `new_rank` when non-null.
///
/// # Safety
/// `adapter` must be a live handle; `new_rank` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn selora_adapter_expand(
    adapter: *mut SeloraAdapter,
    new_rank: *mut usize,
) -> SeloraStatus {
    guarded(|| {
        if adapter.is_null() {
            return fail(
                SeloraStatus::NullArgument,
                "selora_adapter_expand: null adapter",
            );
        }
        let handle = unsafe { &mut *adapter };
        let SeloraAdapter { inner, rng } = handle;
        match inner.expand(rng) {
            Ok(()) => {
                if !new_rank.is_null() {
                    unsafe { *new_rank = inner.rank() };
                }
                SeloraStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Collapse the adapter into a single effective weight,
/// `W0 + scale * (A B)`, written as a `d_in x d_out` row-major array.
///
/// # Safety
/// `adapter` must be a live handle; `out` must point to `d_in * d_out`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn selora_adapter_merge_weights(
    adapter: *const SeloraAdapter,
    out: *mut f64,
) -> SeloraStatus {
    guarded(|| {
        let handle = match unsafe { borrow(adapter, "selora_adapter_merge_weights") } {
            Ok(h) => h,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(
                SeloraStatus::NullArgument,
                "selora_adapter_merge_weights: null out",
            );
        }
        let merged = handle.inner.merge_weights();
        let dst = unsafe { std::slice::from_raw_parts_mut(out, merged.len()) };
        dst.copy_from_slice(merged.data());
        SeloraStatus::Ok
    })
}
