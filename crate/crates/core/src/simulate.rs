//! Synthetic data generation and the replicated bias / MSPE / coverage study.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::summarize;
use crate::error::{Error, Result};
use crate::model_compare::{compare, dic, pointwise_loglik, psis_loo, waic, ComparisonTable, Criterion, CriterionResult};
use crate::model_spec::{layout, Dataset, ModelConfig, Observation, ParameterSet, RandomEffects};
use crate::sampler::{run, SamplerSettings};

/// How the fixed-effect design is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateDesign {
    /// `x = (1)`, so each `beta[k]` is the outcome intercept.
    InterceptOnly,
    /// `x = (1, age)` with a time-varying age `baseline + t`, baseline drawn
    /// from `N(mean, sd^2)` per subject.
    InterceptAge { mean: f64, sd: f64 },
}

impl CovariateDesign {
    pub fn dim(&self) -> usize {
        match self {
            CovariateDesign::InterceptOnly => 1,
            CovariateDesign::InterceptAge { .. } => 2,
        }
    }

    pub fn names(&self) -> Vec<String> {
        match self {
            CovariateDesign::InterceptOnly => vec!["intercept".into()],
            CovariateDesign::InterceptAge { .. } => vec!["intercept".into(), "age".into()],
        }
    }
}

/// Generating values of the population parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueParameters {
    pub design: CovariateDesign,
    /// Row-major `p x d`.
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_delta: f64,
    /// Length `p - 1`.
    pub sigma_alpha0: Vec<f64>,
    pub sigma_alpha1: Vec<f64>,
    /// Common correlation among the `2p - 1` free effects when data are
    /// generated with joint random effects.
    #[serde(default = "default_correlation")]
    pub exchangeable_correlation: f64,
}

fn default_correlation() -> f64 {
    0.3
}

impl Default for TrueParameters {
    fn default() -> Self {
        Self {
            design: CovariateDesign::InterceptOnly,
            beta: vec![1.0, 0.5, 2.0, 0.8],
            gamma: vec![0.2, 0.1, 0.25, 0.5],
            sigma: vec![0.1, 0.2, 0.3, 0.25],
            sigma_delta: 4.0,
            sigma_alpha0: vec![0.5, 1.0, 0.8],
            sigma_alpha1: vec![1.0, 2.0, 1.5, 1.0],
            exchangeable_correlation: default_correlation(),
        }
    }
}

impl TrueParameters {
    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    pub fn d(&self) -> usize {
        self.design.dim()
    }

    pub fn check(&self, p: usize) -> Result<()> {
        let d = self.d();
        let dims_ok = self.gamma.len() == p
            && self.sigma.len() == p
            && self.sigma_alpha1.len() == p
            && self.sigma_alpha0.len() + 1 == p
            && self.beta.len() == p * d;
        if !dims_ok {
            return Err(Error::Dimension(format!(
                "true parameters do not match p = {p} outcomes and d = {d} covariates"
            )));
        }
        let nonneg = self
            .gamma
            .iter()
            .chain(&self.sigma)
            .chain(&self.sigma_alpha0)
            .chain(&self.sigma_alpha1)
            .chain(std::iter::once(&self.sigma_delta))
            .all(|v| v.is_finite() && *v >= 0.0);
        if !nonneg {
            return Err(Error::Config("true slopes and scales must be nonnegative".into()));
        }
        let k = (2 * p - 1) as f64;
        let rho = self.exchangeable_correlation;
        if p > 1 && !(rho < 1.0 && rho > -1.0 / (k - 1.0)) {
            return Err(Error::Config(format!(
                "exchangeable correlation {rho} is not positive definite for dimension {k}"
            )));
        }
        Ok(())
    }
}

/// `k x k` correlation matrix with every off-diagonal entry equal to `rho`.
pub fn exchangeable_correlation(k: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |a, b| if a == b { 1.0 } else { rho })
}

/// Draws a dataset of `n` subjects with `q` visits each, every outcome
/// measured at every visit. Visit times are `Uniform(0, 10)`. Returns the data
/// and the full generating parameters including the subject effects.
pub fn generate_dataset(
    truth: &TrueParameters,
    n: usize,
    p: usize,
    q: usize,
    variant: RandomEffects,
    seed: u64,
) -> Result<(Dataset, ParameterSet)> {
    if n == 0 || p == 0 || q == 0 {
        return Err(Error::Dimension("n, p and q must all be at least 1".into()));
    }
    truth.check(p)?;
    let d = truth.d();
    let m = p - 1;
    let kdim = 2 * p - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let corr_chol = match variant {
        RandomEffects::Univariate => None,
        RandomEffects::Multivariate => Some(
            exchangeable_correlation(kdim, truth.exchangeable_correlation)
                .cholesky()
                .expect("checked positive definite")
                .l(),
        ),
    };
    let scales: Vec<f64> = truth.sigma_alpha0.iter().chain(&truth.sigma_alpha1).copied().collect();

    let mut delta = Vec::with_capacity(n);
    let mut alpha0_free = Vec::with_capacity(n * m);
    let mut alpha1 = Vec::with_capacity(n * p);
    let mut observations = Vec::with_capacity(n * p * q);
    for i in 0..n {
        delta.push(truth.sigma_delta * normal(&mut rng));
        let z: Vec<f64> = (0..kdim).map(|_| normal(&mut rng)).collect();
        let effects: Vec<f64> = match &corr_chol {
            None => z.iter().zip(&scales).map(|(z, s)| z * s).collect(),
            Some(l) => (0..kdim)
                .map(|a| scales[a] * (0..=a).map(|b| l[(a, b)] * z[b]).sum::<f64>())
                .collect(),
        };
        alpha0_free.extend_from_slice(&effects[..m]);
        alpha1.extend_from_slice(&effects[m..]);
        let baseline_age = match truth.design {
            CovariateDesign::InterceptOnly => 0.0,
            CovariateDesign::InterceptAge { mean, sd } => mean + sd * normal(&mut rng),
        };
        let mut times: Vec<f64> = (0..q).map(|_| rng.random_range(0.0..10.0)).collect();
        times.sort_by(f64::total_cmp);
        for &t in &times {
            let x = match truth.design {
                CovariateDesign::InterceptOnly => vec![1.0],
                CovariateDesign::InterceptAge { .. } => vec![1.0, baseline_age + t],
            };
            for k in 0..p {
                observations.push(Observation {
                    subject: i,
                    outcome: k,
                    time: t,
                    covariates: x.clone(),
                    value: 0.0,
                });
            }
        }
    }

    let params = ParameterSet {
        p,
        d,
        latent_time: true,
        beta: truth.beta.clone(),
        gamma: truth.gamma.clone(),
        sigma: truth.sigma.clone(),
        sigma_delta: truth.sigma_delta,
        sigma_alpha0: truth.sigma_alpha0.clone(),
        sigma_alpha1: truth.sigma_alpha1.clone(),
        corr_chol,
        delta,
        alpha0_free,
        alpha1,
    };
    for obs in &mut observations {
        let eta = crate::posterior::linear_predictor(&params, obs.subject, obs.outcome, obs.time, &obs.covariates);
        obs.value = eta + params.sigma[obs.outcome] * normal(&mut rng);
    }
    let dataset = Dataset::new(
        observations,
        (1..=n).map(|i| format!("S{i}")).collect(),
        (1..=p).map(|k| format!("Y{k}")).collect(),
        truth.design.names(),
    )?;
    Ok((dataset, params))
}

/// Posterior mean and equal-tailed 95% interval of one parameter in one fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Bias, MSPE and 95% coverage of one parameter across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterMetric {
    pub name: String,
    pub truth: f64,
    pub bias: f64,
    pub mspe: f64,
    pub c95: f64,
    pub replicates: usize,
}

/// Aggregates per-replicate estimates of a parameter with generating value
/// `truth`.
pub fn aggregate_metrics(name: &str, truth: f64, estimates: &[Estimate]) -> ParameterMetric {
    let m = estimates.len() as f64;
    let bias = estimates.iter().map(|e| e.mean - truth).sum::<f64>() / m;
    let mspe = estimates.iter().map(|e| (e.mean - truth).powi(2)).sum::<f64>() / m;
    let covered = estimates
        .iter()
        .filter(|e| e.lower <= truth && truth <= e.upper)
        .count();
    ParameterMetric {
        name: name.to_string(),
        truth,
        bias,
        mspe,
        c95: covered as f64 / m,
        replicates: estimates.len(),
    }
}

/// One model fitted to one replicate.
#[derive(Debug, Clone)]
pub struct FitRecord {
    pub replicate: usize,
    pub variant: RandomEffects,
    /// Population-level parameters by name, in layout order.
    pub estimates: Vec<(String, Estimate)>,
    pub max_rhat: f64,
    pub divergences: usize,
    pub waic: CriterionResult,
    pub looic: CriterionResult,
    pub dic: CriterionResult,
    /// Subject time shifts: posterior means and generating values.
    pub delta_hat: Vec<f64>,
    pub delta_true: Vec<f64>,
}

impl FitRecord {
    pub fn criterion(&self, c: Criterion) -> &CriterionResult {
        match c {
            Criterion::Waic => &self.waic,
            Criterion::Looic => &self.looic,
            Criterion::Dic => &self.dic,
        }
    }

    pub fn estimate(&self, name: &str) -> Option<Estimate> {
        self.estimates.iter().find(|(n, _)| n == name).map(|(_, e)| *e)
    }
}

/// A replicate/model combination that failed and was excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub replicate: usize,
    pub variant: RandomEffects,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct VariantMetrics {
    pub variant: RandomEffects,
    pub metrics: Vec<ParameterMetric>,
}

#[derive(Debug, Clone)]
pub struct ReplicateMetrics {
    pub variant_true: RandomEffects,
    pub per_variant: Vec<VariantMetrics>,
    /// One comparison per criterion over replicates where every fit succeeded;
    /// empty when fewer than two variants were fitted.
    pub comparisons: Vec<ComparisonTable>,
    pub records: Vec<FitRecord>,
    pub audit: Vec<AuditEntry>,
}

/// Sizes and seeds of a replicated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub replicates: usize,
    pub n: usize,
    pub q: usize,
    pub seed: u64,
}

/// Generating values of the population parameters, named as in the fitted
/// layout. The correlation entries are present only for joint effects.
pub fn true_population_values(truth: &TrueParameters, variant: RandomEffects) -> Vec<(String, f64)> {
    let p = truth.p();
    let d = truth.d();
    let mut out = Vec::new();
    for k in 0..p {
        for j in 0..d {
            out.push((format!("beta[{},{}]", k + 1, j + 1), truth.beta[k * d + j]));
        }
    }
    out.extend(truth.gamma.iter().enumerate().map(|(k, v)| (format!("gamma[{}]", k + 1), *v)));
    out.extend(truth.sigma.iter().enumerate().map(|(k, v)| (format!("sigma[{}]", k + 1), *v)));
    out.push(("sigma_delta".into(), truth.sigma_delta));
    out.extend(
        truth
            .sigma_alpha0
            .iter()
            .enumerate()
            .map(|(k, v)| (format!("sigma_alpha0[{}]", k + 1), *v)),
    );
    out.extend(
        truth
            .sigma_alpha1
            .iter()
            .enumerate()
            .map(|(k, v)| (format!("sigma_alpha1[{}]", k + 1), *v)),
    );
    if variant == RandomEffects::Multivariate {
        let kdim = 2 * p - 1;
        for a in 1..kdim {
            for b in 0..a {
                out.push((format!("corr[{},{}]", a + 1, b + 1), truth.exchangeable_correlation));
            }
        }
    }
    out
}

/// Fits one model to one dataset and condenses the result.
pub fn fit_replicate(
    replicate: usize,
    dataset: &Dataset,
    generated: &ParameterSet,
    config: &ModelConfig,
    settings: &SamplerSettings,
) -> Result<FitRecord> {
    let draws = run(config, dataset, settings)?;
    let summary = summarize(&draws);
    let lay = &draws.layout;
    let population: Vec<(String, Estimate)> = summary
        .iter()
        .enumerate()
        .filter(|(j, _)| lay.block_of(*j).is_some_and(|b| b.is_population()))
        .map(|(_, row)| {
            (
                row.name.clone(),
                Estimate {
                    mean: row.mean,
                    lower: row.lower,
                    upper: row.upper,
                },
            )
        })
        .collect();
    let max_rhat = summary.iter().map(|r| r.rhat).fold(f64::NEG_INFINITY, f64::max);
    let delta_range = lay.range(crate::model_spec::Block::Delta);
    let delta_hat = summary[delta_range].iter().map(|r| r.mean).collect();
    let ll = pointwise_loglik(&draws, dataset);
    Ok(FitRecord {
        replicate,
        variant: config.random_effects,
        estimates: population,
        max_rhat,
        divergences: draws.divergences(),
        waic: waic(&ll),
        looic: psis_loo(&ll),
        dic: dic(&draws, dataset),
        delta_hat,
        delta_true: generated.delta.clone(),
    })
}

/// Runs the replicated study: data generated under `variant_true`, every
/// variant in `variants_fit` fitted to each replicate. Failed fits are
/// excluded from the metrics and listed in the audit.
pub fn run_replicates(
    design: &StudyDesign,
    truth: &TrueParameters,
    variant_true: RandomEffects,
    variants_fit: &[RandomEffects],
    settings: &SamplerSettings,
) -> Result<ReplicateMetrics> {
    if design.replicates == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    if variants_fit.is_empty() {
        return Err(Error::Config("at least one model must be fitted".into()));
    }
    settings.validate()?;
    let p = truth.p();
    truth.check(p)?;
    // Fail fast on impossible dimensions before spending time sampling.
    layout(&ModelConfig::default(), design.n, p, truth.d())?;

    let outcomes: Vec<Vec<std::result::Result<FitRecord, AuditEntry>>> = (0..design.replicates)
        .into_par_iter()
        .map(|r| {
            let data_seed = design.seed.wrapping_add(r as u64);
            let generated = generate_dataset(truth, design.n, p, design.q, variant_true, data_seed);
            variants_fit
                .iter()
                .map(|&variant| {
                    let (dataset, params) = generated.as_ref().map_err(|e| AuditEntry {
                        replicate: r,
                        variant,
                        reason: format!("data generation failed: {e}"),
                    })?;
                    let fit_settings = SamplerSettings {
                        seed: settings.seed.wrapping_add(r as u64),
                        ..settings.clone()
                    };
                    let config = ModelConfig::with_random_effects(variant);
                    fit_replicate(r, dataset, params, &config, &fit_settings).map_err(|e| AuditEntry {
                        replicate: r,
                        variant,
                        reason: e.to_string(),
                    })
                })
                .collect()
        })
        .collect();

    let mut records = Vec::new();
    let mut audit = Vec::new();
    let mut complete = Vec::new();
    for (r, fits) in outcomes.into_iter().enumerate() {
        let mut all_ok = true;
        for fit in fits {
            match fit {
                Ok(rec) => records.push(rec),
                Err(entry) => {
                    log::warn!("replicate {} ({}) excluded: {}", entry.replicate, entry.variant.label(), entry.reason);
                    audit.push(entry);
                    all_ok = false;
                }
            }
        }
        if all_ok {
            complete.push(r);
        }
    }

    let per_variant = variants_fit
        .iter()
        .map(|&variant| {
            let fits: Vec<&FitRecord> = records.iter().filter(|f| f.variant == variant).collect();
            let metrics = true_population_values(truth, variant)
                .into_iter()
                .filter_map(|(name, value)| {
                    let est: Vec<Estimate> = fits.iter().filter_map(|f| f.estimate(&name)).collect();
                    (!est.is_empty()).then(|| aggregate_metrics(&name, value, &est))
                })
                .collect();
            VariantMetrics { variant, metrics }
        })
        .collect();

    let mut comparisons = Vec::new();
    if variants_fit.len() >= 2 && !complete.is_empty() {
        let models: Vec<String> = variants_fit.iter().map(|v| v.label().to_string()).collect();
        for criterion in [Criterion::Waic, Criterion::Looic, Criterion::Dic] {
            let results: Vec<Vec<CriterionResult>> = variants_fit
                .iter()
                .map(|&v| {
                    complete
                        .iter()
                        .map(|&r| {
                            records
                                .iter()
                                .find(|f| f.replicate == r && f.variant == v)
                                .expect("complete replicate has every fit")
                                .criterion(criterion)
                                .clone()
                        })
                        .collect()
                })
                .collect();
            comparisons.push(compare(&models, &results)?);
        }
    }

    Ok(ReplicateMetrics {
        variant_true,
        per_variant,
        comparisons,
        records,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::validate_dataset;

    fn noiseless() -> TrueParameters {
        TrueParameters {
            sigma: vec![0.0; 4],
            sigma_delta: 0.0,
            sigma_alpha0: vec![0.0; 3],
            sigma_alpha1: vec![0.0; 4],
            ..TrueParameters::default()
        }
    }

    #[test]
    fn noiseless_data_follow_fixed_effects() {
        let truth = noiseless();
        let (ds, _) = generate_dataset(&truth, 5, 4, 3, RandomEffects::Univariate, 1).unwrap();
        for o in &ds.observations {
            let expected = truth.beta[o.outcome] + truth.gamma[o.outcome] * o.time;
            assert!((o.value - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn times_lie_in_range_and_data_validate() {
        for variant in [RandomEffects::Univariate, RandomEffects::Multivariate] {
            let (ds, params) = generate_dataset(&TrueParameters::default(), 50, 4, 4, variant, 7).unwrap();
            assert!(ds.observations.iter().all(|o| (0.0..=10.0).contains(&o.time)));
            assert_eq!(ds.len(), 50 * 4 * 4);
            assert!(validate_dataset(&ds).is_valid());
            for i in 0..50 {
                let s: f64 = (0..4).map(|k| params.alpha0(i, k)).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let t = TrueParameters::default();
        let a = generate_dataset(&t, 10, 4, 2, RandomEffects::Multivariate, 3).unwrap();
        let b = generate_dataset(&t, 10, 4, 2, RandomEffects::Multivariate, 3).unwrap();
        assert_eq!(a.0, b.0);
        let c = generate_dataset(&t, 10, 4, 2, RandomEffects::Multivariate, 4).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn shift_spread_matches_generating_scale() {
        let (_, params) = generate_dataset(&TrueParameters::default(), 10_000, 4, 1, RandomEffects::Univariate, 5).unwrap();
        let n = params.delta.len() as f64;
        let mean = params.delta.iter().sum::<f64>() / n;
        let sd = (params.delta.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 4.0).abs() < 0.08, "{sd}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = generate_dataset(&TrueParameters::default(), 5, 3, 2, RandomEffects::Univariate, 1);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn perfect_estimator_metrics() {
        let est = vec![Estimate { mean: 2.0, lower: 2.0, upper: 2.0 }; 5];
        let m = aggregate_metrics("x", 2.0, &est);
        assert_eq!((m.bias, m.mspe, m.c95), (0.0, 0.0, 1.0));
    }

    #[test]
    fn hand_assigned_metrics() {
        let est = [
            Estimate { mean: 0.9, lower: 0.5, upper: 1.2 },
            Estimate { mean: 1.3, lower: 1.1, upper: 1.5 },
        ];
        let m = aggregate_metrics("x", 1.0, &est);
        assert!((m.bias - 0.1).abs() < 1e-12);
        assert!((m.mspe - 0.05).abs() < 1e-12);
        assert_eq!(m.c95, 0.5);
        assert!(m.mspe >= m.bias * m.bias);
    }

    #[test]
    fn named_truth_matches_layout_names() {
        let t = TrueParameters::default();
        for variant in [RandomEffects::Univariate, RandomEffects::Multivariate] {
            let lay = layout(&ModelConfig::with_random_effects(variant), 3, 4, 1).unwrap();
            let names = lay.names();
            for (name, _) in true_population_values(&t, variant) {
                assert!(names.contains(&name), "{name}");
            }
        }
    }
}
