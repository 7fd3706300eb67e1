use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ltjmm::simulate::{generate_dataset, TrueParameters};
use ltjmm::RandomEffects;
use ltjmm_ffi::*;

fn last_error() -> String {
    let p = ltjmm_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Column arrays for a small simulated study.
struct Columns {
    subject: Vec<usize>,
    outcome: Vec<usize>,
    time: Vec<f64>,
    value: Vec<f64>,
    covariates: Vec<f64>,
    n: usize,
    p: usize,
    d: usize,
}

fn simulated(n: usize, seed: u64) -> Columns {
    let truth = TrueParameters::default();
    let (ds, _) = generate_dataset(&truth, n, 4, 3, RandomEffects::Univariate, seed).unwrap();
    let obs = &ds.observations;
    Columns {
        subject: obs.iter().map(|o| o.subject).collect(),
        outcome: obs.iter().map(|o| o.outcome).collect(),
        time: obs.iter().map(|o| o.time).collect(),
        value: obs.iter().map(|o| o.value).collect(),
        covariates: obs.iter().flat_map(|o| o.covariates.clone()).collect(),
        n,
        p: 4,
        d: ds.n_covariates(),
    }
}

fn dataset_from(c: &Columns) -> (LtjmmStatus, *mut LtjmmDataset) {
    let mut out = ptr::null_mut();
    let status = unsafe {
        ltjmm_dataset_from_arrays(
            c.subject.len(),
            c.subject.as_ptr(),
            c.outcome.as_ptr(),
            c.time.as_ptr(),
            c.value.as_ptr(),
            c.covariates.as_ptr(),
            c.n,
            c.p,
            c.d,
            &mut out,
        )
    };
    (status, out)
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(ltjmm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut ds = ptr::null_mut();
    let status = unsafe { ltjmm_dataset_read_csv(ptr::null(), &mut ds) };
    assert_eq!(status, LtjmmStatus::NullPointer);
    assert!(last_error().contains("path"));
    assert!(ds.is_null());

    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { ltjmm_fit(ptr::null(), ptr::null(), &mut fit) }, LtjmmStatus::NullPointer);
    assert_eq!(
        unsafe { ltjmm_dataset_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) },
        LtjmmStatus::NullPointer
    );
    assert!(unsafe { ltjmm_fit_parameter_name(ptr::null(), 0) }.is_null());
    unsafe {
        ltjmm_dataset_free(ptr::null_mut());
        ltjmm_fit_free(ptr::null_mut());
    }
}

#[test]
fn success_clears_previous_error() {
    let mut ds = ptr::null_mut();
    unsafe { ltjmm_dataset_read_csv(ptr::null(), &mut ds) };
    assert!(!ltjmm_last_error_message().is_null());
    let c = simulated(5, 3);
    let (status, ds) = dataset_from(&c);
    assert_eq!(status, LtjmmStatus::Ok);
    assert!(ltjmm_last_error_message().is_null());
    unsafe { ltjmm_dataset_free(ds) };
}

#[test]
fn missing_file_is_an_io_error() {
    let path = CString::new("/nonexistent/ltjmm/data.csv").unwrap();
    let mut ds = ptr::null_mut();
    let status = unsafe { ltjmm_dataset_read_csv(path.as_ptr(), &mut ds) };
    assert_eq!(status, LtjmmStatus::Io);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn malformed_csv_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.csv");
    std::fs::write(&file, "subject_id,outcome,time,value\nS1,Y1,0.0,abc\n").unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let mut ds = ptr::null_mut();
    let status = unsafe { ltjmm_dataset_read_csv(path.as_ptr(), &mut ds) };
    assert_eq!(status, LtjmmStatus::Parse);
    assert!(last_error().contains(":2:"), "{}", last_error());
}

#[test]
fn out_of_range_indices_are_rejected() {
    let c = Columns {
        subject: vec![0, 3],
        outcome: vec![0, 0],
        time: vec![0.0, 1.0],
        value: vec![1.0, 2.0],
        covariates: vec![1.0, 1.0],
        n: 2,
        p: 1,
        d: 1,
    };
    let (status, ds) = dataset_from(&c);
    assert_ne!(status, LtjmmStatus::Ok);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn dims_and_identifiability_of_array_dataset() {
    let c = simulated(8, 11);
    let (status, ds) = dataset_from(&c);
    assert_eq!(status, LtjmmStatus::Ok);
    let (mut n, mut p, mut d, mut rows) = (0, 0, 0, 0);
    assert_eq!(unsafe { ltjmm_dataset_dims(ds, &mut n, &mut p, &mut d, &mut rows) }, LtjmmStatus::Ok);
    assert_eq!((n, p, d, rows), (8, 4, c.d, 8 * 4 * 3));

    let mut report = LtjmmIdentifiability::default();
    assert_eq!(unsafe { ltjmm_dataset_check(ds, 1, &mut report) }, LtjmmStatus::Ok);
    assert_eq!(
        report,
        LtjmmIdentifiability {
            design_rank_ok: 1,
            time_independent_of_intercept: 1,
            constraint_system_unique: 1
        }
    );
    unsafe { ltjmm_dataset_free(ds) };
}

#[test]
fn time_as_covariate_fails_check() {
    // A covariate column equal to visit time puts time in the design span.
    let mut c = simulated(6, 5);
    c.d = 2;
    c.covariates = c.time.iter().flat_map(|t| [1.0, *t]).collect();
    let (status, ds) = dataset_from(&c);
    assert_eq!(status, LtjmmStatus::Ok);
    let mut report = LtjmmIdentifiability::default();
    let status = unsafe { ltjmm_dataset_check(ds, 1, &mut report) };
    assert_eq!(status, LtjmmStatus::Validation);
    assert_eq!(report.design_rank_ok, 0);
    assert!(!last_error().is_empty());
    unsafe { ltjmm_dataset_free(ds) };
}

#[test]
fn fit_round_trip() {
    let c = simulated(12, 21);
    let (status, ds) = dataset_from(&c);
    assert_eq!(status, LtjmmStatus::Ok);

    let mut opts = ltjmm_fit_options_default();
    assert_eq!(opts.latent_time, 1);
    opts.chains = 2;
    opts.iterations = 300;
    opts.warmup = 150;
    opts.seed = 99;
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { ltjmm_fit(ds, &opts, &mut fit) }, LtjmmStatus::Ok, "{:?}", unsafe {
        ltjmm_last_error_message().as_ref().map(|p| CStr::from_ptr(p))
    });
    unsafe { ltjmm_dataset_free(ds) };

    let (mut chains, mut per_chain, mut params) = (0, 0, 0);
    assert_eq!(unsafe { ltjmm_fit_dims(fit, &mut chains, &mut per_chain, &mut params) }, LtjmmStatus::Ok);
    assert_eq!((chains, per_chain), (2, 150));
    assert!(params > 0);

    let names: Vec<String> = (0..params)
        .map(|j| unsafe { CStr::from_ptr(ltjmm_fit_parameter_name(fit, j)) }.to_string_lossy().into_owned())
        .collect();
    assert!(unsafe { ltjmm_fit_parameter_name(fit, params) }.is_null());
    let g = names.iter().position(|n| n == "gamma[1]").expect("gamma[1] present");

    let mut buf = vec![0.0; per_chain * params];
    assert_eq!(unsafe { ltjmm_fit_draws(fit, 1, buf.as_mut_ptr(), buf.len()) }, LtjmmStatus::Ok);
    assert!(buf.iter().all(|v| v.is_finite()));
    let mut all = Vec::new();
    for chain in 0..chains {
        assert_eq!(unsafe { ltjmm_fit_draws(fit, chain, buf.as_mut_ptr(), buf.len()) }, LtjmmStatus::Ok);
        all.extend(buf.chunks_exact(params).map(|row| row[g]));
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;

    let mut s = LtjmmSummary::default();
    assert_eq!(unsafe { ltjmm_fit_summary(fit, g, &mut s) }, LtjmmStatus::Ok);
    assert!((s.mean - mean).abs() < 1e-12 * mean.abs().max(1.0));
    assert!(s.lower <= s.mean && s.mean <= s.upper);
    assert!(s.mean > 0.0);

    let mut crit = LtjmmCriteria::default();
    assert_eq!(unsafe { ltjmm_fit_criteria(fit, &mut crit) }, LtjmmStatus::Ok);
    assert!(crit.waic.is_finite() && crit.looic.is_finite() && crit.dic.is_finite());
    assert!(crit.p_waic > 0.0);

    assert_eq!(
        unsafe { ltjmm_fit_draws(fit, 0, buf.as_mut_ptr(), buf.len() - 1) },
        LtjmmStatus::InvalidArgument
    );
    assert_eq!(unsafe { ltjmm_fit_draws(fit, 5, buf.as_mut_ptr(), buf.len()) }, LtjmmStatus::InvalidArgument);
    assert_eq!(unsafe { ltjmm_fit_summary(fit, params, &mut s) }, LtjmmStatus::InvalidArgument);
    unsafe { ltjmm_fit_free(fit) };
}

#[test]
fn invalid_sampler_options_are_rejected() {
    let c = simulated(4, 1);
    let (_, ds) = dataset_from(&c);
    let mut opts = ltjmm_fit_options_default();
    opts.warmup = opts.iterations + 1;
    let mut fit = ptr::null_mut();
    let status = unsafe { ltjmm_fit(ds, &opts, &mut fit) };
    assert_eq!(status, LtjmmStatus::InvalidArgument);
    assert!(fit.is_null());
    unsafe { ltjmm_dataset_free(ds) };
}

#[test]
fn weighted_normal_scores_are_symmetric() {
    let values = [3.0, 1.0, 2.0];
    let weights = [1.0, 1.0, 1.0];
    let mut out = [f64::NAN; 3];
    assert_eq!(
        unsafe { ltjmm_weighted_normal_scores(values.as_ptr(), weights.as_ptr(), 3, out.as_mut_ptr()) },
        LtjmmStatus::Ok
    );
    // Mid-rank ECDF gives 1/6, 1/2, 5/6 for the sorted values.
    let z = 0.967_421_566_101_701; // standard normal quantile of 5/6
    assert!((out[0] - z).abs() < 1e-12);
    assert_eq!(out[2], 0.0);
    assert!((out[1] + z).abs() < 1e-12);

    let bad = [1.0, -1.0, 1.0];
    let status = unsafe { ltjmm_weighted_normal_scores(values.as_ptr(), bad.as_ptr(), 3, out.as_mut_ptr()) };
    assert_ne!(status, LtjmmStatus::Ok);
}

#[test]
fn header_declares_every_entry_point_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("ltjmm.h");
    let text = std::fs::read_to_string(&header).expect("header generated by the build script");
    for symbol in [
        "ltjmm_last_error_message",
        "ltjmm_version",
        "ltjmm_fit_options_default",
        "ltjmm_dataset_read_csv",
        "ltjmm_dataset_from_arrays",
        "ltjmm_dataset_dims",
        "ltjmm_dataset_check",
        "ltjmm_dataset_free",
        "ltjmm_fit(",
        "ltjmm_fit_dims",
        "ltjmm_fit_parameter_name",
        "ltjmm_fit_draws",
        "ltjmm_fit_summary",
        "ltjmm_fit_criteria",
        "ltjmm_fit_free",
        "ltjmm_weighted_normal_scores",
        "LTJMM_STATUS_PANIC = 7",
    ] {
        assert!(text.contains(symbol), "header lacks {symbol}");
    }
    match Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99"]).arg(&header).status() {
        Ok(status) => assert!(status.success(), "header does not compile as C99"),
        Err(_) => eprintln!("no C compiler found, skipping compile check"),
    }
}
