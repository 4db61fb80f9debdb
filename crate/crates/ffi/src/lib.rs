//! C ABI for the kf-dmd library: opaque handles, integer error codes, and a
//! thread-local last-error message. The generated header lives in
//! `include/kf_dmd.h`.

use kf_dmd::dmd::{exact_dmd, RankPolicy};
use kf_dmd::enkf::{run_filter, CovStorage, FilterConfig, FilterKind, FilterMode, FilterRun};
use kf_dmd::series::{build_data_matrices, SnapshotSeries};
use kf_dmd::spectral::SpectralParams;
use kf_dmd::Error;
use libc::{c_char, c_double, c_int, size_t};
use ndarray::Array2;
use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Success.
pub const KFDMD_OK: c_int = 0;
/// Null pointer or malformed handle.
pub const KFDMD_ERR_NULL: c_int = 1;
/// Invalid configuration or arguments.
pub const KFDMD_ERR_CONFIG: c_int = 2;
/// Numerical failure.
pub const KFDMD_ERR_NUMERICAL: c_int = 3;
/// IO failure.
pub const KFDMD_ERR_IO: c_int = 4;
/// Panic caught at the boundary.
pub const KFDMD_ERR_PANIC: c_int = 5;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn error_code(err: &Error) -> c_int {
    match err.exit_code() {
        2 => KFDMD_ERR_CONFIG,
        4 => KFDMD_ERR_IO,
        _ => KFDMD_ERR_NUMERICAL,
    }
}

fn fail(err: Error) -> c_int {
    let code = error_code(&err);
    set_error(err.to_string());
    code
}

/// Copies the last error message on this thread into `buf` (NUL-terminated,
/// truncated to `len`); returns the full message length.
#[no_mangle]
pub extern "C" fn kfdmd_last_error(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Estimated modes, eigenvalues, and amplitudes (opaque).
pub struct KfdmdSpectrum {
    inner: SpectralParams,
}

/// A completed filter run (opaque).
pub struct KfdmdFilterRun {
    inner: FilterRun,
}

fn guard<F: FnOnce() -> c_int>(f: F) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("panic inside kf-dmd");
            KFDMD_ERR_PANIC
        }
    }
}

unsafe fn series_from_raw(
    data: *const c_double,
    dim: size_t,
    count: size_t,
    dt: c_double,
) -> Result<SnapshotSeries, Error> {
    if data.is_null() {
        return Err(Error::InvalidInput("data pointer is null".into()));
    }
    if dim == 0 || count < 2 {
        return Err(Error::InvalidInput(format!(
            "need dim >= 1 and count >= 2, got {dim}x{count}"
        )));
    }
    let slice = std::slice::from_raw_parts(data, dim * count);
    // snapshots are stored contiguously, one after another
    let values = Array2::from_shape_vec((count, dim), slice.to_vec())
        .expect("length checked")
        .reversed_axes()
        .to_owned();
    SnapshotSeries::new(values, dt, 0.0)
}

/// Exact DMD on `count` snapshots of dimension `dim` (each snapshot
/// contiguous in `data`); writes an owned spectrum handle to `out`.
///
/// # Safety
/// `data` must point to `dim*count` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_exact_dmd(
    data: *const c_double,
    dim: size_t,
    count: size_t,
    dt: c_double,
    rank: size_t,
    out: *mut *mut KfdmdSpectrum,
) -> c_int {
    guard(|| {
        if out.is_null() {
            set_error("output pointer is null");
            return KFDMD_ERR_NULL;
        }
        let series = match series_from_raw(data, dim, count, dt) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let (y0, y1) = build_data_matrices(&series);
        match exact_dmd(&y0, &y1, RankPolicy::Fixed(rank)) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(KfdmdSpectrum { inner: params }));
                KFDMD_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Runs the ensemble filter on `count` snapshots of dimension `dim`.
/// `filter_kind`: 0 = ETKF, 1 = stochastic EnKF. `nonautonomous`: 0 or 1.
///
/// # Safety
/// `data` must point to `dim*count` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_run_filter(
    data: *const c_double,
    dim: size_t,
    count: size_t,
    dt: c_double,
    rank: size_t,
    ensemble_size: size_t,
    delays: size_t,
    sigma: c_double,
    q_std: c_double,
    mode_prior_var: c_double,
    eig_prior_var: c_double,
    seed: u64,
    filter_kind: c_int,
    nonautonomous: c_int,
    out: *mut *mut KfdmdFilterRun,
) -> c_int {
    guard(|| {
        if out.is_null() {
            set_error("output pointer is null");
            return KFDMD_ERR_NULL;
        }
        let series = match series_from_raw(data, dim, count, dt) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let kind = match filter_kind {
            0 => FilterKind::Etkf,
            1 => FilterKind::Enkf,
            other => {
                set_error(format!("unknown filter kind {other}"));
                return KFDMD_ERR_CONFIG;
            }
        };
        let mode = if nonautonomous != 0 {
            FilterMode::NonAutonomous
        } else {
            FilterMode::Autonomous
        };
        let cfg = FilterConfig {
            ensemble_size,
            sigma,
            q_std,
            delays,
            filter_kind: kind,
            mode_prior_var,
            eig_prior_var,
            seed,
            rank,
            store_covariance: CovStorage::None,
        };
        match run_filter(&series, &cfg, mode) {
            Ok(run) => {
                *out = Box::into_raw(Box::new(KfdmdFilterRun { inner: run }));
                KFDMD_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `handle` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_spectrum_rank(handle: *const KfdmdSpectrum) -> size_t {
    if handle.is_null() {
        return 0;
    }
    (*handle).inner.rank()
}

/// # Safety
/// `handle` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_spectrum_dim(handle: *const KfdmdSpectrum) -> size_t {
    if handle.is_null() {
        return 0;
    }
    (*handle).inner.dim()
}

/// Writes the eigenvalues into `out_re`/`out_im` (length = rank).
///
/// # Safety
/// Pointers must be valid for `rank` doubles each.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_spectrum_eigenvalues(
    handle: *const KfdmdSpectrum,
    out_re: *mut c_double,
    out_im: *mut c_double,
) -> c_int {
    guard(|| {
        if handle.is_null() || out_re.is_null() || out_im.is_null() {
            set_error("null pointer");
            return KFDMD_ERR_NULL;
        }
        for (i, v) in (*handle).inner.eigenvalues.iter().enumerate() {
            *out_re.add(i) = v.re;
            *out_im.add(i) = v.im;
        }
        KFDMD_OK
    })
}

/// Writes the modes column by column into `out_re`/`out_im`
/// (length = dim·rank each).
///
/// # Safety
/// Pointers must be valid for `dim*rank` doubles each.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_spectrum_modes(
    handle: *const KfdmdSpectrum,
    out_re: *mut c_double,
    out_im: *mut c_double,
) -> c_int {
    guard(|| {
        if handle.is_null() || out_re.is_null() || out_im.is_null() {
            set_error("null pointer");
            return KFDMD_ERR_NULL;
        }
        let params = &(*handle).inner;
        let mut idx = 0;
        for col in params.modes.columns() {
            for v in col.iter() {
                *out_re.add(idx) = v.re;
                *out_im.add(idx) = v.im;
                idx += 1;
            }
        }
        KFDMD_OK
    })
}

/// Writes the amplitudes into `out_re`/`out_im` (length = rank).
///
/// # Safety
/// Pointers must be valid for `rank` doubles each.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_spectrum_amplitudes(
    handle: *const KfdmdSpectrum,
    out_re: *mut c_double,
    out_im: *mut c_double,
) -> c_int {
    guard(|| {
        if handle.is_null() || out_re.is_null() || out_im.is_null() {
            set_error("null pointer");
            return KFDMD_ERR_NULL;
        }
        for (i, v) in (*handle).inner.amplitudes.iter().enumerate() {
            *out_re.add(i) = v.re;
            *out_im.add(i) = v.im;
        }
        KFDMD_OK
    })
}

/// Reconstructs the snapshot at step `k` into `out` (length = dim).
///
/// # Safety
/// `out` must be valid for `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_spectrum_reconstruct(
    handle: *const KfdmdSpectrum,
    k: size_t,
    out: *mut c_double,
) -> c_int {
    guard(|| {
        if handle.is_null() || out.is_null() {
            set_error("null pointer");
            return KFDMD_ERR_NULL;
        }
        match (*handle).inner.reconstruct(k) {
            Ok(x) => {
                for (i, v) in x.iter().enumerate() {
                    *out.add(i) = *v;
                }
                KFDMD_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of assimilation steps in a completed run.
///
/// # Safety
/// `handle` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_filter_run_steps(handle: *const KfdmdFilterRun) -> size_t {
    if handle.is_null() {
        return 0;
    }
    (*handle).inner.steps.len()
}

/// Posterior-mean spectrum after step `index` (0-based record index) as a
/// new owned handle; pass `steps - 1` for the final estimate.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_filter_run_spectrum(
    handle: *const KfdmdFilterRun,
    index: size_t,
    out: *mut *mut KfdmdSpectrum,
) -> c_int {
    guard(|| {
        if handle.is_null() || out.is_null() {
            set_error("null pointer");
            return KFDMD_ERR_NULL;
        }
        let run = &(*handle).inner;
        let Some(record) = run.steps.get(index) else {
            set_error(format!(
                "step index {index} out of range (run has {} steps)",
                run.steps.len()
            ));
            return KFDMD_ERR_CONFIG;
        };
        match record.posterior.mean_params(run.rank, run.dim) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(KfdmdSpectrum { inner: params }));
                KFDMD_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `handle` must come from this library; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_spectrum_free(handle: *mut KfdmdSpectrum) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must come from this library; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kfdmd_filter_run_free(handle: *mut KfdmdFilterRun) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kf_dmd::systems::gen_ode_auto;

    fn snapshots() -> (Vec<f64>, usize, usize) {
        let truth = gen_ode_auto(0.99f64.ln(), -0.5, 1.0, 60, [3.0, -1.0]).unwrap();
        let values = truth.series.values();
        let (dim, count) = (values.nrows(), values.ncols());
        let mut flat = Vec::with_capacity(dim * count);
        for col in values.columns() {
            flat.extend(col.iter());
        }
        (flat, dim, count)
    }

    #[test]
    fn exact_dmd_roundtrip_through_the_abi() {
        let (flat, dim, count) = snapshots();
        let mut handle: *mut KfdmdSpectrum = std::ptr::null_mut();
        let code = unsafe { kfdmd_exact_dmd(flat.as_ptr(), dim, count, 1.0, 3, &mut handle) };
        assert_eq!(code, KFDMD_OK);
        unsafe {
            assert_eq!(kfdmd_spectrum_rank(handle), 3);
            assert_eq!(kfdmd_spectrum_dim(handle), 3);
            let mut re = [0.0; 3];
            let mut im = [0.0; 3];
            assert_eq!(
                kfdmd_spectrum_eigenvalues(handle, re.as_mut_ptr(), im.as_mut_ptr()),
                KFDMD_OK
            );
            for (got, want) in re.iter().zip([0.99, 0.9801, (-0.5f64).exp()]) {
                assert!((got - want).abs() < 1e-8, "{got} vs {want}");
            }
            let mut x = [0.0; 3];
            assert_eq!(kfdmd_spectrum_reconstruct(handle, 0, x.as_mut_ptr()), KFDMD_OK);
            assert!((x[0] - 3.0).abs() < 1e-8);
            let mut modes_re = [0.0; 9];
            let mut modes_im = [0.0; 9];
            assert_eq!(
                kfdmd_spectrum_modes(handle, modes_re.as_mut_ptr(), modes_im.as_mut_ptr()),
                KFDMD_OK
            );
            let mut amp_re = [0.0; 3];
            let mut amp_im = [0.0; 3];
            assert_eq!(
                kfdmd_spectrum_amplitudes(handle, amp_re.as_mut_ptr(), amp_im.as_mut_ptr()),
                KFDMD_OK
            );
            kfdmd_spectrum_free(handle);
        }
    }

    #[test]
    fn filter_run_through_the_abi() {
        let (flat, dim, count) = snapshots();
        let mut run: *mut KfdmdFilterRun = std::ptr::null_mut();
        let code = unsafe {
            kfdmd_run_filter(
                flat.as_ptr(),
                dim,
                count,
                1.0,
                3,
                40,
                20,
                0.1,
                0.0,
                1e-2,
                3e-4,
                7,
                0,
                0,
                &mut run,
            )
        };
        assert_eq!(code, KFDMD_OK);
        unsafe {
            let steps = kfdmd_filter_run_steps(run);
            assert_eq!(steps, count - 20);
            let mut spec: *mut KfdmdSpectrum = std::ptr::null_mut();
            assert_eq!(kfdmd_filter_run_spectrum(run, steps - 1, &mut spec), KFDMD_OK);
            let mut re = [0.0; 3];
            let mut im = [0.0; 3];
            assert_eq!(
                kfdmd_spectrum_eigenvalues(spec, re.as_mut_ptr(), im.as_mut_ptr()),
                KFDMD_OK
            );
            assert!(re.iter().all(|v| v.is_finite()));
            kfdmd_spectrum_free(spec);
            kfdmd_filter_run_free(run);
        }
    }

    #[test]
    fn errors_set_code_and_message() {
        let mut handle: *mut KfdmdSpectrum = std::ptr::null_mut();
        let code = unsafe { kfdmd_exact_dmd(std::ptr::null(), 3, 10, 1.0, 3, &mut handle) };
        assert_eq!(code, KFDMD_ERR_CONFIG);
        let mut buf = [0i8; 256];
        let len = kfdmd_last_error(buf.as_mut_ptr(), buf.len());
        assert!(len > 0);
        let msg = unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }
            .to_string_lossy()
            .into_owned();
        assert!(msg.contains("null"), "{msg}");

        // rank larger than achievable -> numerical/config class, not a panic
        let (flat, dim, count) = snapshots();
        let code = unsafe { kfdmd_exact_dmd(flat.as_ptr(), dim, count, 1.0, 99, &mut handle) };
        assert_ne!(code, KFDMD_OK);
        assert_ne!(code, KFDMD_ERR_PANIC);
    }

    #[test]
    fn bad_filter_kind_is_config_error() {
        let (flat, dim, count) = snapshots();
        let mut run: *mut KfdmdFilterRun = std::ptr::null_mut();
        let code = unsafe {
            kfdmd_run_filter(
                flat.as_ptr(), dim, count, 1.0, 3, 40, 20, 0.1, 0.0, 1e-2, 3e-4, 7, 9, 0, &mut run,
            )
        };
        assert_eq!(code, KFDMD_ERR_CONFIG);
    }

    #[test]
    fn header_is_generated() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/kf_dmd.h");
        let text = std::fs::read_to_string(header).unwrap();
        for symbol in [
            "kfdmd_exact_dmd",
            "kfdmd_run_filter",
            "kfdmd_spectrum_eigenvalues",
            "kfdmd_last_error",
            "KfdmdSpectrum",
        ] {
            assert!(text.contains(symbol), "header missing {symbol}");
        }
    }
}
