//! Property tests over the data-facing utilities.

use proptest::prelude::*;

use ltjmm::io::{format_f64, read_long_csv, write_dataset, WeightedEcdf};
use ltjmm::{Dataset, Observation};

proptest! {
    #[test]
    fn formatted_floats_round_trip(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        let text = format_f64(x);
        prop_assert_eq!(text.parse::<f64>().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn ecdf_is_monotone_and_bounded(
        pairs in proptest::collection::vec((-1e6f64..1e6, 0.0f64..10.0), 1..200),
        probes in proptest::collection::vec(-2e6f64..2e6, 1..50),
    ) {
        let (values, mut weights): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        weights[0] += 0.5;
        let ecdf = WeightedEcdf::new(&values, &weights).unwrap();
        let mut probes = probes;
        probes.extend(values.iter().copied());
        probes.sort_by(f64::total_cmp);
        let mut last_f = 0.0;
        let mut last_z = f64::NEG_INFINITY;
        for x in probes {
            let f = ecdf.cdf(x);
            let z = ecdf.normal_score(x);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(z.is_finite());
            prop_assert!(f >= last_f && z >= last_z);
            last_f = f;
            last_z = z;
        }
        let w = ecdf.effective_size();
        prop_assert!(w >= 1.0 - 1e-12 && w <= values.len() as f64 + 1e-9);
    }

    #[test]
    fn negated_values_negate_scores(values in proptest::collection::hash_set(-1000i32..1000, 2..100)) {
        let v: Vec<f64> = values.into_iter().map(f64::from).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let w = vec![1.0; v.len()];
        let a = WeightedEcdf::new(&v, &w).unwrap();
        let b = WeightedEcdf::new(&neg, &w).unwrap();
        for x in &v {
            prop_assert!((a.normal_score(*x) + b.normal_score(-x)).abs() < 1e-12);
        }
    }
}

#[test]
fn written_dataset_reads_back_identically() {
    let obs = (0..30)
        .map(|r| Observation {
            subject: r % 5,
            outcome: r % 2,
            time: r as f64 / 7.0,
            covariates: vec![1.0, (r as f64).sqrt() * 1e-3, -(r as f64) / 3.0],
            value: (r as f64 * 0.37).sin() * 1e5,
        })
        .collect();
    let ds = Dataset::new(
        obs,
        (0..5).map(|i| format!("id-{i}")).collect(),
        vec!["mem".into(), "exec".into()],
        vec!["intercept".into(), "x".into(), "z".into()],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_dataset(&ds, &path).unwrap();
    let back = read_long_csv(&path).unwrap();
    assert_eq!(back, ds);
}
