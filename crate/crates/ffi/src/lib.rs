//! C interface to the `ltjmm` engine.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_read`
//! style functions and released with the matching `*_free`. Every fallible
//! function returns an [`LtjmmStatus`]; on failure a description is available
//! from [`ltjmm_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ltjmm::diagnostics::{summarize, SummaryRow};
use ltjmm::identifiability::check_identifiability;
use ltjmm::io::{read_long_csv, weighted_inverse_gaussian_transform};
use ltjmm::model_compare::{dic, pointwise_loglik, psis_loo, waic};
use ltjmm::{Dataset, DrawsMatrix, Error, ModelConfig, Observation, RandomEffects, SamplerSettings};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LtjmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The dataset or model failed validation.
    Validation = 3,
    Io = 4,
    Parse = 5,
    /// Sampling or evaluation failed at run time.
    Runtime = 6,
    /// An internal panic was caught at the boundary.
    Panic = 7,
}

/// Random-effect variant.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LtjmmVariant {
    /// Independent random intercepts and slopes.
    Univariate = 0,
    /// Jointly Gaussian random intercepts and slopes.
    Multivariate = 1,
}

/// Model and sampler settings for [`ltjmm_fit`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtjmmFitOptions {
    pub variant: LtjmmVariant,
    /// Nonzero to include the subject time shift.
    pub latent_time: u8,
    pub chains: usize,
    /// Iterations per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
    pub seed: u64,
    pub max_tree_depth: usize,
    pub target_accept: f64,
}

/// Posterior summary of one parameter.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LtjmmSummary {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub rhat: f64,
    pub ess: f64,
}

/// Information criteria on the deviance scale.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LtjmmCriteria {
    pub waic: f64,
    pub p_waic: f64,
    pub looic: f64,
    pub p_loo: f64,
    pub dic: f64,
    pub p_dic: f64,
    /// Observations whose Pareto shape estimate exceeds 0.7.
    pub n_high_pareto_k: usize,
}

/// Identifiability findings; each flag is 1 when the check passes.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LtjmmIdentifiability {
    pub design_rank_ok: u8,
    pub time_independent_of_intercept: u8,
    pub constraint_system_unique: u8,
}

/// Opaque dataset handle.
pub struct LtjmmDataset {
    inner: Dataset,
}

/// Opaque fitted-model handle.
pub struct LtjmmFit {
    draws: DrawsMatrix,
    dataset: Dataset,
    summary: Vec<SummaryRow>,
    names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> LtjmmStatus {
    match e {
        Error::Validation(_) | Error::MismatchedObservations { .. } => LtjmmStatus::Validation,
        Error::Config(_) | Error::Dimension(_) | Error::UnknownSubject(_) => LtjmmStatus::InvalidArgument,
        Error::MissingColumn { .. } | Error::Parse { .. } | Error::Csv { .. } => LtjmmStatus::Parse,
        Error::Io { .. } => LtjmmStatus::Io,
        Error::ChainAborted { .. } => LtjmmStatus::Runtime,
    }
}

fn fail(status: LtjmmStatus, message: impl Into<String>) -> LtjmmStatus {
    set_last_error(message.into());
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), LtjmmStatus>) -> LtjmmStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LtjmmStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(LtjmmStatus::Panic, format!("internal panic: {message}"))
        }
    }
}

fn lift<T>(r: ltjmm::Result<T>) -> Result<T, LtjmmStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), LtjmmStatus> {
    if p.is_null() {
        Err(fail(LtjmmStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

/// Message describing the last failure on this thread, or null. The string
/// stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn ltjmm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ltjmm_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"unknown",
    };
    VERSION.as_ptr()
}

/// Default options: independent effects, latent time on, 2 chains of 2000
/// iterations with 1000 warmup.
#[no_mangle]
pub extern "C" fn ltjmm_fit_options_default() -> LtjmmFitOptions {
    let s = SamplerSettings::default();
    LtjmmFitOptions {
        variant: LtjmmVariant::Univariate,
        latent_time: 1,
        chains: s.chains,
        iterations: s.iterations,
        warmup: s.warmup,
        thin: s.thin,
        seed: s.seed,
        max_tree_depth: s.max_tree_depth,
        target_accept: s.target_accept,
    }
}

/// Reads a long-format CSV file into a new dataset handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_dataset_read_csv(path: *const c_char, out: *mut *mut LtjmmDataset) -> LtjmmStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(LtjmmStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let inner = lift(read_long_csv(path))?;
        unsafe { *out = Box::into_raw(Box::new(LtjmmDataset { inner })) };
        Ok(())
    })
}

/// Builds a dataset from column arrays of length `n_obs`. `covariates` is
/// row-major `n_obs x n_covariates` and may be null when `n_covariates` is 0.
/// Subjects and outcomes are zero-based indices and receive generated names
/// `S1..` and `Y1..`.
///
/// # Safety
/// Every non-null array must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_dataset_from_arrays(
    n_obs: usize,
    subject: *const usize,
    outcome: *const usize,
    time: *const f64,
    value: *const f64,
    covariates: *const f64,
    n_subjects: usize,
    n_outcomes: usize,
    n_covariates: usize,
    out: *mut *mut LtjmmDataset,
) -> LtjmmStatus {
    guard(|| {
        non_null(out, "out")?;
        if n_obs > 0 {
            non_null(subject, "subject")?;
            non_null(outcome, "outcome")?;
            non_null(time, "time")?;
            non_null(value, "value")?;
            if n_covariates > 0 {
                non_null(covariates, "covariates")?;
            }
        }
        let slice = |p: *const f64, len: usize| -> &[f64] {
            if len == 0 {
                &[]
            } else {
                unsafe { std::slice::from_raw_parts(p, len) }
            }
        };
        let (subject, outcome) = if n_obs == 0 {
            (&[][..], &[][..])
        } else {
            unsafe {
                (
                    std::slice::from_raw_parts(subject, n_obs),
                    std::slice::from_raw_parts(outcome, n_obs),
                )
            }
        };
        let time = slice(time, n_obs);
        let value = slice(value, n_obs);
        let x = slice(covariates, n_obs * n_covariates);
        let observations = (0..n_obs)
            .map(|r| Observation {
                subject: subject[r],
                outcome: outcome[r],
                time: time[r],
                covariates: x[r * n_covariates..(r + 1) * n_covariates].to_vec(),
                value: value[r],
            })
            .collect();
        let inner = lift(Dataset::new(
            observations,
            (1..=n_subjects).map(|i| format!("S{i}")).collect(),
            (1..=n_outcomes).map(|k| format!("Y{k}")).collect(),
            (1..=n_covariates).map(|j| format!("x{j}")).collect(),
        ))?;
        unsafe { *out = Box::into_raw(Box::new(LtjmmDataset { inner })) };
        Ok(())
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_dataset_free(dataset: *mut LtjmmDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Subjects, outcomes, covariates and rows of a dataset. Any output pointer
/// may be null.
///
/// # Safety
/// `dataset` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_dataset_dims(
    dataset: *const LtjmmDataset,
    n_subjects: *mut usize,
    n_outcomes: *mut usize,
    n_covariates: *mut usize,
    n_rows: *mut usize,
) -> LtjmmStatus {
    guard(|| {
        non_null(dataset, "dataset")?;
        let ds = unsafe { &(*dataset).inner };
        for (p, v) in [
            (n_subjects, ds.n_subjects()),
            (n_outcomes, ds.n_outcomes()),
            (n_covariates, ds.n_covariates()),
            (n_rows, ds.len()),
        ] {
            if !p.is_null() {
                unsafe { *p = v };
            }
        }
        Ok(())
    })
}

/// Validates the dataset and runs the identifiability checks. Returns
/// `Validation` (with the findings as the error message) when any check
/// fails; `report` is filled in either case when non-null.
///
/// # Safety
/// `dataset` must be a valid handle; `report` may be null.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_dataset_check(
    dataset: *const LtjmmDataset,
    latent_time: u8,
    report: *mut LtjmmIdentifiability,
) -> LtjmmStatus {
    guard(|| {
        non_null(dataset, "dataset")?;
        let ds = unsafe { &(*dataset).inner };
        let config = ModelConfig {
            latent_time: latent_time != 0,
            ..ModelConfig::default()
        };
        let validation = ltjmm::validate_dataset(ds);
        let r = check_identifiability(ds, &config);
        if !report.is_null() {
            unsafe {
                *report = LtjmmIdentifiability {
                    design_rank_ok: r.design_rank_ok.into(),
                    time_independent_of_intercept: r.time_independent_of_intercept.into(),
                    constraint_system_unique: r.constraint_system_unique.into(),
                }
            };
        }
        if validation.is_valid() && r.all_ok() {
            Ok(())
        } else {
            let mut notes = r.notes;
            if notes.is_empty() {
                notes.push(validation.to_string());
            }
            Err(fail(LtjmmStatus::Validation, notes.join("; ")))
        }
    })
}

/// Fits the model to `dataset`. `options` may be null for defaults.
///
/// # Safety
/// `dataset` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_fit(
    dataset: *const LtjmmDataset,
    options: *const LtjmmFitOptions,
    out: *mut *mut LtjmmFit,
) -> LtjmmStatus {
    guard(|| {
        non_null(dataset, "dataset")?;
        non_null(out, "out")?;
        let ds = unsafe { &(*dataset).inner };
        let o = if options.is_null() {
            ltjmm_fit_options_default()
        } else {
            unsafe { *options }
        };
        let config = ModelConfig {
            random_effects: match o.variant {
                LtjmmVariant::Univariate => RandomEffects::Univariate,
                LtjmmVariant::Multivariate => RandomEffects::Multivariate,
            },
            latent_time: o.latent_time != 0,
            ..ModelConfig::default()
        };
        let settings = SamplerSettings {
            chains: o.chains,
            iterations: o.iterations,
            warmup: o.warmup,
            thin: o.thin,
            seed: o.seed,
            max_tree_depth: o.max_tree_depth,
            target_accept: o.target_accept,
            ..SamplerSettings::default()
        };
        let draws = lift(ltjmm::run(&config, ds, &settings))?;
        let summary = summarize(&draws);
        let names = draws
            .names
            .iter()
            .map(|n| CString::new(n.as_str()).unwrap_or_default())
            .collect();
        let fit = LtjmmFit {
            draws,
            dataset: ds.clone(),
            summary,
            names,
        };
        unsafe { *out = Box::into_raw(Box::new(fit)) };
        Ok(())
    })
}

/// Releases a fit handle. Null is ignored.
///
/// # Safety
/// `fit` must come from [`ltjmm_fit`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_fit_free(fit: *mut LtjmmFit) {
    if !fit.is_null() {
        drop(unsafe { Box::from_raw(fit) });
    }
}

/// Chains, stored draws per chain and constrained parameters of a fit.
///
/// # Safety
/// `fit` must be a valid handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_fit_dims(
    fit: *const LtjmmFit,
    n_chains: *mut usize,
    draws_per_chain: *mut usize,
    n_params: *mut usize,
) -> LtjmmStatus {
    guard(|| {
        non_null(fit, "fit")?;
        let f = unsafe { &*fit };
        let per_chain = f.draws.chains.first().map_or(0, |c| c.values.len());
        for (p, v) in [
            (n_chains, f.draws.n_chains()),
            (draws_per_chain, per_chain),
            (n_params, f.draws.names.len()),
        ] {
            if !p.is_null() {
                unsafe { *p = v };
            }
        }
        Ok(())
    })
}

/// Name of parameter `index`, owned by the fit; null when out of range.
///
/// # Safety
/// `fit` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_fit_parameter_name(fit: *const LtjmmFit, index: usize) -> *const c_char {
    if fit.is_null() {
        return ptr::null();
    }
    let f = unsafe { &*fit };
    f.names.get(index).map_or(ptr::null(), |n| n.as_ptr())
}

/// Copies the draws of `chain` into `buffer`, row-major `draws x params`.
/// `len` must equal `draws_per_chain * n_params`.
///
/// # Safety
/// `buffer` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_fit_draws(fit: *const LtjmmFit, chain: usize, buffer: *mut f64, len: usize) -> LtjmmStatus {
    guard(|| {
        non_null(fit, "fit")?;
        non_null(buffer, "buffer")?;
        let f = unsafe { &*fit };
        let c = f
            .draws
            .chains
            .get(chain)
            .ok_or_else(|| fail(LtjmmStatus::InvalidArgument, format!("chain {chain} out of range")))?;
        let width = f.draws.names.len();
        let need = c.values.len() * width;
        if len != need {
            return Err(fail(
                LtjmmStatus::InvalidArgument,
                format!("buffer holds {len} values, {need} required"),
            ));
        }
        let out = unsafe { std::slice::from_raw_parts_mut(buffer, len) };
        for (row, v) in out.chunks_exact_mut(width).zip(&c.values) {
            row.copy_from_slice(v);
        }
        Ok(())
    })
}

/// Posterior summary of parameter `index`.
///
/// # Safety
/// `fit` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_fit_summary(fit: *const LtjmmFit, index: usize, out: *mut LtjmmSummary) -> LtjmmStatus {
    guard(|| {
        non_null(fit, "fit")?;
        non_null(out, "out")?;
        let f = unsafe { &*fit };
        let r = f
            .summary
            .get(index)
            .ok_or_else(|| fail(LtjmmStatus::InvalidArgument, format!("parameter {index} out of range")))?;
        unsafe {
            *out = LtjmmSummary {
                mean: r.mean,
                sd: r.sd,
                lower: r.lower,
                upper: r.upper,
                rhat: r.rhat,
                ess: r.ess,
            }
        };
        Ok(())
    })
}

/// WAIC, PSIS-LOO and DIC of a fit on its own data.
///
/// # Safety
/// `fit` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_fit_criteria(fit: *const LtjmmFit, out: *mut LtjmmCriteria) -> LtjmmStatus {
    guard(|| {
        non_null(fit, "fit")?;
        non_null(out, "out")?;
        let f = unsafe { &*fit };
        let ll = pointwise_loglik(&f.draws, &f.dataset);
        let w = waic(&ll);
        let l = psis_loo(&ll);
        let d = dic(&f.draws, &f.dataset);
        unsafe {
            *out = LtjmmCriteria {
                waic: w.value,
                p_waic: w.effective_params,
                looic: l.value,
                p_loo: l.effective_params,
                dic: d.value,
                p_dic: d.effective_params,
                n_high_pareto_k: l.high_pareto_k().len(),
            }
        };
        Ok(())
    })
}

/// Weighted normal scores of `values` written to `out` (all of length `n`).
///
/// # Safety
/// `values`, `weights` and `out` must hold `n` doubles; `out` may alias
/// neither input.
#[no_mangle]
pub unsafe extern "C" fn ltjmm_weighted_normal_scores(
    values: *const f64,
    weights: *const f64,
    n: usize,
    out: *mut f64,
) -> LtjmmStatus {
    guard(|| {
        non_null(values, "values")?;
        non_null(weights, "weights")?;
        non_null(out, "out")?;
        let (v, w) = unsafe { (std::slice::from_raw_parts(values, n), std::slice::from_raw_parts(weights, n)) };
        let z = lift(weighted_inverse_gaussian_transform(v, w))?;
        unsafe { std::slice::from_raw_parts_mut(out, n) }.copy_from_slice(&z);
        Ok(())
    })
}
