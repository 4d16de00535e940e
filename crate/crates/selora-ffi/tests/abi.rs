//! Drives the C entry points the way a foreign caller would: raw pointers,
//! status codes, the thread-local error message.

use std::ffi::CStr;
use std::ptr;

use selora_ffi::*;

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(selora_last_error_message())
            .to_string_lossy()
            .into_owned()
    }
}

fn new_adapter(d_in: usize, d_out: usize, seed: u64) -> *mut SeloraAdapter {
    let w0: Vec<f64> = (0..d_in * d_out).map(|i| (i as f64) * 0.1 - 0.3).collect();
    let b0: Vec<f64> = (0..d_out).map(|i| 0.05 * i as f64).collect();
    let mut handle = ptr::null_mut();
    let status = unsafe {
        selora_adapter_new(
            c"layer".as_ptr(),
            w0.as_ptr(),
            b0.as_ptr(),
            d_in,
            d_out,
            seed,
            &mut handle,
        )
    };
    assert_eq!(status, SeloraStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

#[test]
fn lifecycle_and_introspection() {
    let h = new_adapter(6, 4, 9);
    unsafe {
        let (mut d_in, mut d_out, mut rank, mut params) = (0usize, 0usize, 0usize, 0usize);
        assert_eq!(selora_adapter_dims(h, &mut d_in, &mut d_out), SeloraStatus::Ok);
        assert_eq!((d_in, d_out), (6, 4));
        assert_eq!(selora_adapter_rank(h, &mut rank), SeloraStatus::Ok);
        assert_eq!(rank, 1);
        assert_eq!(selora_adapter_trainable_params(h, &mut params), SeloraStatus::Ok);
        assert_eq!(params, 1 * (6 + 4));
        selora_adapter_free(h);
    }
}

#[test]
fn forward_matches_base_layer_at_init_and_after_expansion() {
    let (d_in, d_out, n) = (5usize, 3usize, 2usize);
    let h = new_adapter(d_in, d_out, 42);
    let x: Vec<f64> = (0..n * d_in).map(|i| (i as f64).sin()).collect();
    let mut before = vec![0.0; n * d_out];
    let mut after = vec![0.0; n * d_out];
    unsafe {
        assert_eq!(
            selora_adapter_forward(h, x.as_ptr(), n, before.as_mut_ptr()),
            SeloraStatus::Ok
        );
        // B starts at zero: the adapter is exactly x W0 + b0.
        let w0: Vec<f64> = (0..d_in * d_out).map(|i| (i as f64) * 0.1 - 0.3).collect();
        let b0: Vec<f64> = (0..d_out).map(|i| 0.05 * i as f64).collect();
        for r in 0..n {
            for c in 0..d_out {
                let mut want = b0[c];
                for k in 0..d_in {
                    want += x[r * d_in + k] * w0[k * d_out + c];
                }
                let got = before[r * d_out + c];
                assert!(
                    (got - want).abs() <= 1e-12,
                    "({r},{c}): got {got}, want {want}"
                );
            }
        }

        // Expansion must not change the function.
        let mut new_rank = 0usize;
        assert_eq!(selora_adapter_expand(h, &mut new_rank), SeloraStatus::Ok);
        assert_eq!(new_rank, 2);
        assert_eq!(
            selora_adapter_forward(h, x.as_ptr(), n, after.as_mut_ptr()),
            SeloraStatus::Ok
        );
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a, b, "expansion changed the forward output");
        }
        selora_adapter_free(h);
    }
}

#[test]
fn same_seed_gives_identical_adapters() {
    let (d_in, d_out, n) = (7usize, 4usize, 3usize);
    let a = new_adapter(d_in, d_out, 5);
    let b = new_adapter(d_in, d_out, 5);
    let x: Vec<f64> = (0..n * d_in).map(|i| (i as f64 * 0.37).cos()).collect();
    let mut ya = vec![0.0; n * d_out];
    let mut yb = vec![0.0; n * d_out];
    unsafe {
        // Walk both handles through an expansion so the seeded streams, not
        // just the initializations, are compared.
        assert_eq!(selora_adapter_expand(a, ptr::null_mut()), SeloraStatus::Ok);
        assert_eq!(selora_adapter_expand(b, ptr::null_mut()), SeloraStatus::Ok);
        let mut wa = vec![0.0; d_in * d_out];
        let mut wb = vec![0.0; d_in * d_out];
        assert_eq!(selora_adapter_merge_weights(a, wa.as_mut_ptr()), SeloraStatus::Ok);
        assert_eq!(selora_adapter_merge_weights(b, wb.as_mut_ptr()), SeloraStatus::Ok);
        assert_eq!(wa, wb);
        assert_eq!(selora_adapter_forward(a, x.as_ptr(), n, ya.as_mut_ptr()), SeloraStatus::Ok);
        assert_eq!(selora_adapter_forward(b, x.as_ptr(), n, yb.as_mut_ptr()), SeloraStatus::Ok);
        assert_eq!(ya, yb);
        selora_adapter_free(a);
        selora_adapter_free(b);
    }
}

#[test]
fn merge_equals_forward_on_identity_batch() {
    let (d_in, d_out) = (4usize, 6usize);
    let h = new_adapter(d_in, d_out, 11);
    unsafe {
        assert_eq!(selora_adapter_expand(h, ptr::null_mut()), SeloraStatus::Ok);
        let mut merged = vec![0.0; d_in * d_out];
        assert_eq!(selora_adapter_merge_weights(h, merged.as_mut_ptr()), SeloraStatus::Ok);
        // Feeding the identity recovers merged rows plus the bias.
        let mut eye = vec![0.0; d_in * d_in];
        for i in 0..d_in {
            eye[i * d_in + i] = 1.0;
        }
        let mut y = vec![0.0; d_in * d_out];
        assert_eq!(selora_adapter_forward(h, eye.as_ptr(), d_in, y.as_mut_ptr()), SeloraStatus::Ok);
        let b0: Vec<f64> = (0..d_out).map(|i| 0.05 * i as f64).collect();
        for r in 0..d_in {
            for c in 0..d_out {
                let want = merged[r * d_out + c] + b0[c];
                let got = y[r * d_out + c];
                assert!((got - want).abs() <= 1e-12, "({r},{c}): {got} vs {want}");
            }
        }
        selora_adapter_free(h);
    }
}

#[test]
fn rank_cap_is_reported_with_its_code() {
    let h = new_adapter(3, 3, 2);
    unsafe {
        assert_eq!(selora_adapter_set_max_rank(h, 2), SeloraStatus::Ok);
        assert_eq!(selora_adapter_expand(h, ptr::null_mut()), SeloraStatus::Ok);
        let mut rank = 0usize;
        assert_eq!(selora_adapter_rank(h, &mut rank), SeloraStatus::Ok);
        assert_eq!(rank, 2);
        assert_eq!(
            selora_adapter_expand(h, ptr::null_mut()),
            SeloraStatus::RankCapReached
        );
        assert!(last_error().contains("cap"), "got: {}", last_error());
        // Lowering the cap below the current rank is invalid.
        assert_eq!(selora_adapter_set_max_rank(h, 1), SeloraStatus::InvalidArgument);
        selora_adapter_free(h);
    }
}

#[test]
fn null_and_invalid_arguments_are_rejected() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(
            selora_adapter_new(ptr::null(), ptr::null(), ptr::null(), 2, 2, 0, &mut out),
            SeloraStatus::NullArgument
        );
        assert!(!last_error().is_empty());

        let w0 = [0.0; 4];
        let b0 = [0.0; 2];
        assert_eq!(
            selora_adapter_new(c"x".as_ptr(), w0.as_ptr(), b0.as_ptr(), 0, 2, 0, &mut out),
            SeloraStatus::InvalidArgument
        );

        let mut rank = 0usize;
        assert_eq!(
            selora_adapter_rank(ptr::null(), &mut rank),
            SeloraStatus::NullArgument
        );

        let h = new_adapter(2, 2, 1);
        assert_eq!(
            selora_adapter_forward(h, ptr::null(), 1, ptr::null_mut()),
            SeloraStatus::NullArgument
        );
        let mut y = [0.0f64; 4];
        assert_eq!(
            selora_adapter_forward(h, w0.as_ptr(), 0, y.as_mut_ptr()),
            SeloraStatus::InvalidArgument
        );
        selora_adapter_free(h);
        // Freeing null is a documented no-op.
        selora_adapter_free(ptr::null_mut());
    }
}

#[test]
fn version_is_a_nul_terminated_semver() {
    let v = unsafe { CStr::from_ptr(selora_version()) }
        .to_str()
        .expect("utf-8 version");
    assert_eq!(v.split('.').count(), 3);
}

#[test]
fn status_enum_is_stable_for_c_callers() {
    // The header hard-codes these discriminants; renumbering is an ABI break.
    assert_eq!(SeloraStatus::Ok as i32, 0);
    assert_eq!(SeloraStatus::NullArgument as i32, 1);
    assert_eq!(SeloraStatus::InvalidArgument as i32, 2);
    assert_eq!(SeloraStatus::ShapeMismatch as i32, 3);
    assert_eq!(SeloraStatus::RankCapReached as i32, 4);
    assert_eq!(SeloraStatus::Panic as i32, 5);
}

#[test]
fn error_message_is_thread_local() {
    let h = new_adapter(3, 3, 7);
    unsafe {
        let mut rank = 0usize;
        assert_eq!(selora_adapter_rank(ptr::null(), &mut rank), SeloraStatus::NullArgument);
        assert!(!last_error().is_empty());
        selora_adapter_free(h);
    }
    // A fresh thread has never failed, so its message is empty.
    std::thread::spawn(|| {
        let msg = last_error();
        assert!(msg.is_empty(), "fresh thread saw: {msg}");
    })
    .join()
    .unwrap();
}
