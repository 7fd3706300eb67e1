//! Pointwise log-likelihoods and the information criteria WAIC, PSIS-LOO and
//! DIC, plus cross-model comparison.

use std::fmt;

use crate::diagnostics::{quantile, running_mean, variance};
use crate::error::{Error, Result};
use crate::model_spec::{Dataset, ParameterSet};
use crate::posterior::{apply_covariate_mask, log_likelihood, pointwise_log_likelihood};
use crate::sampler::DrawsMatrix;

/// `draws x observations` matrix of conditional log-likelihood values.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseLogLik {
    /// Row-major, `n_draws` rows of `n_obs` entries.
    pub values: Vec<f64>,
    pub n_draws: usize,
    pub n_obs: usize,
}

impl PointwiseLogLik {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_draws = rows.len();
        let n_obs = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_obs), "ragged log-likelihood rows");
        Self {
            values: rows.into_iter().flatten().collect(),
            n_draws,
            n_obs,
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_obs..(s + 1) * self.n_obs]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n_draws).map(|s| self.values[s * self.n_obs + i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Waic,
    Looic,
    Dic,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Waic => "WAIC",
            Criterion::Looic => "LOOIC",
            Criterion::Dic => "DIC",
        })
    }
}

/// A criterion on the deviance scale (lower is better).
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub criterion: Criterion,
    pub value: f64,
    pub effective_params: f64,
    /// Per-observation contribution to `value`.
    pub pointwise: Vec<f64>,
    /// Pareto shape estimate per observation (PSIS-LOO only). `-inf` marks an
    /// observation whose weights were degenerate and left unsmoothed; NaN marks
    /// raw importance sampling with too few draws to fit a tail.
    pub pareto_k: Option<Vec<f64>>,
}

/// Pareto shape above which importance-sampling estimates are unreliable.
pub const PARETO_K_WARNING: f64 = 0.7;

impl CriterionResult {
    pub fn n_obs(&self) -> usize {
        self.pointwise.len()
    }

    /// Observations whose Pareto shape exceeds [`PARETO_K_WARNING`].
    pub fn high_pareto_k(&self) -> Vec<usize> {
        self.pareto_k
            .as_ref()
            .map(|ks| {
                ks.iter()
                    .enumerate()
                    .filter(|(_, &k)| k > PARETO_K_WARNING)
                    .map(|(i, _)| i)
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Log-likelihood of every observation at every draw.
pub fn pointwise_loglik(draws: &DrawsMatrix, dataset: &Dataset) -> PointwiseLogLik {
    let data = apply_covariate_mask(dataset, &draws.config);
    let rows: Vec<Vec<f64>> = draws
        .parameter_sets()
        .map(|ps| pointwise_log_likelihood(&ps, &data))
        .collect();
    PointwiseLogLik {
        n_draws: rows.len(),
        n_obs: data.len(),
        values: rows.into_iter().flatten().collect(),
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn log_mean_exp(x: &[f64]) -> f64 {
    log_sum_exp(x) - (x.len() as f64).ln()
}

/// Widely applicable information criterion.
pub fn waic(ll: &PointwiseLogLik) -> CriterionResult {
    let mut pointwise = Vec::with_capacity(ll.n_obs);
    let mut p_total = 0.0;
    for i in 0..ll.n_obs {
        let col = ll.column(i);
        let lppd = log_mean_exp(&col);
        let p = variance(&col);
        p_total += p;
        pointwise.push(-2.0 * (lppd - p));
    }
    CriterionResult {
        criterion: Criterion::Waic,
        value: pointwise.iter().sum(),
        effective_params: p_total,
        pointwise,
        pareto_k: None,
    }
}

/// Log pointwise predictive density per observation.
pub fn lppd(ll: &PointwiseLogLik) -> Vec<f64> {
    (0..ll.n_obs).map(|i| log_mean_exp(&ll.column(i))).collect()
}

/// Generalized Pareto fit by the Zhang & Stephens empirical Bayes estimator
/// with a weakly informative prior on the shape. `x` must be sorted ascending
/// and positive. Returns `(k, sigma)` in the `(1 + k x / sigma)^(-1/k)`
/// parameterization.
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let prior = 3.0;
    let m = 30 + (nf.sqrt()) as usize;
    let xstar = x[((nf / 4.0 + 0.5).floor() as usize).saturating_sub(1)];
    let x_max = x[n - 1];
    let theta: Vec<f64> = (1..=m)
        .map(|j| 1.0 / x_max + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / prior / xstar)
        .collect();
    let profile: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let b = -t;
            let k = x.iter().map(|v| (b * v).ln_1p()).sum::<f64>() / nf;
            nf * ((b / k).ln() - k - 1.0)
        })
        .collect();
    let lse = log_sum_exp(&profile);
    let theta_hat: f64 = theta
        .iter()
        .zip(&profile)
        .map(|(t, l)| t * (l - lse).exp())
        .sum();
    let k = x.iter().map(|v| (-theta_hat * v).ln_1p()).sum::<f64>() / nf;
    let sigma = -k / theta_hat;
    // Shrink toward 0.5 with the strength of ten pseudo-observations.
    let k = (k * nf + 10.0 * 0.5) / (nf + 10.0);
    (k, sigma)
}

/// Quantile function of the generalized Pareto distribution (location 0).
pub fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

/// Pareto-smoothed log importance weights for one observation.
/// Returns the smoothed (unnormalized) log weights and the shape estimate.
pub fn psis_smooth(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let s = log_ratios.len();
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - max).collect();
    if lw.iter().all(|&v| v == lw[0]) {
        return (lw, f64::NEG_INFINITY);
    }
    if s < 5 {
        return (lw, f64::NAN);
    }
    let sf = s as f64;
    let tail_len = ((0.2 * sf).ceil() as usize).min((3.0 * sf.sqrt()).ceil() as usize);
    let tail_len = tail_len.min(s - 1);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
    let cutoff = lw[order[s - tail_len - 1]];
    let tail_idx = &order[s - tail_len..];
    let exp_cutoff = cutoff.exp();
    let exceed: Vec<f64> = tail_idx.iter().map(|&i| lw[i].exp() - exp_cutoff).collect();
    if tail_len < 5 || exceed.iter().all(|&e| e == exceed[0]) {
        return (lw, f64::NEG_INFINITY);
    }
    let (k, sigma) = gpd_fit(&exceed);
    if !k.is_finite() || !(sigma > 0.0) {
        return (lw, f64::INFINITY);
    }
    let raw_max = 0.0;
    for (r, &i) in tail_idx.iter().enumerate() {
        let p = (r as f64 + 0.5) / tail_len as f64;
        let smoothed = (gpd_quantile(p, k, sigma) + exp_cutoff).ln();
        lw[i] = smoothed.min(raw_max);
    }
    (lw, k)
}

/// Leave-one-out cross-validation by Pareto-smoothed importance sampling,
/// falling back to raw importance sampling below five draws.
pub fn psis_loo(ll: &PointwiseLogLik) -> CriterionResult {
    let mut pointwise = Vec::with_capacity(ll.n_obs);
    let mut ks = Vec::with_capacity(ll.n_obs);
    let mut elpd_total = 0.0;
    let mut lppd_total = 0.0;
    for i in 0..ll.n_obs {
        let col = ll.column(i);
        let ratios: Vec<f64> = col.iter().map(|v| -v).collect();
        let (lw, k) = psis_smooth(&ratios);
        let lppd_i = log_mean_exp(&col);
        // Uniform weights reduce the estimate to the in-sample density.
        let elpd = if k == f64::NEG_INFINITY && lw.iter().all(|&w| w == lw[0]) {
            lppd_i
        } else {
            let norm = log_sum_exp(&lw);
            let terms: Vec<f64> = lw.iter().zip(&col).map(|(w, l)| w - norm + l).collect();
            log_sum_exp(&terms)
        };
        elpd_total += elpd;
        lppd_total += lppd_i;
        pointwise.push(-2.0 * elpd);
        ks.push(k);
    }
    let n_high = ks.iter().filter(|&&k| k > PARETO_K_WARNING).count();
    if n_high > 0 {
        log::warn!("{n_high} observations have Pareto k above {PARETO_K_WARNING}");
    }
    CriterionResult {
        criterion: Criterion::Looic,
        value: -2.0 * elpd_total,
        effective_params: lppd_total - elpd_total,
        pointwise,
        pareto_k: Some(ks),
    }
}

/// Deviance information criterion with the constrained posterior mean as the
/// plug-in point.
pub fn dic(draws: &DrawsMatrix, dataset: &Dataset) -> CriterionResult {
    let data = apply_covariate_mask(dataset, &draws.config);
    let deviances: Vec<f64> = draws
        .parameter_sets()
        .map(|ps| -2.0 * log_likelihood(&ps, &data))
        .collect();
    let mean_dev = running_mean(&deviances);
    let plug_in = ParameterSet::from_constrained(&draws.mean(), &draws.layout);
    let pointwise_hat: Vec<f64> = pointwise_log_likelihood(&plug_in, &data)
        .iter()
        .map(|l| -2.0 * l)
        .collect();
    let d_hat: f64 = pointwise_hat.iter().sum();
    let p_d = mean_dev - d_hat;
    CriterionResult {
        criterion: Criterion::Dic,
        value: d_hat + 2.0 * p_d,
        effective_params: p_d,
        pointwise: pointwise_hat,
        pareto_k: None,
    }
}

/// Differences `a - b` of one criterion across replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseDifference {
    pub first: String,
    pub second: String,
    pub differences: Vec<f64>,
    /// Lower quartile, median and upper quartile of `differences`.
    pub quartiles: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub criterion: Criterion,
    pub models: Vec<String>,
    /// Index into `models` of the best (lowest) model per replicate; ties go
    /// to the earlier model.
    pub winners: Vec<usize>,
    /// Fraction of replicates won by each model.
    pub win_frequency: Vec<f64>,
    pub differences: Vec<PairwiseDifference>,
}

/// Compares models on one criterion. `results[m][r]` is model `m`'s result on
/// replicate `r`.
pub fn compare(models: &[String], results: &[Vec<CriterionResult>]) -> Result<ComparisonTable> {
    if models.len() < 2 || models.len() != results.len() {
        return Err(Error::Config(
            "comparison needs at least two models with one result list each".into(),
        ));
    }
    let n_rep = results[0].len();
    if n_rep == 0 || results.iter().any(|r| r.len() != n_rep) {
        return Err(Error::Config("every model needs the same number of replicates".into()));
    }
    let criterion = results[0][0].criterion;
    for r in 0..n_rep {
        for m in 1..models.len() {
            let (a, b) = (&results[0][r], &results[m][r]);
            if a.n_obs() != b.n_obs() {
                return Err(Error::MismatchedObservations {
                    left: models[0].clone(),
                    right: models[m].clone(),
                    left_n: a.n_obs(),
                    right_n: b.n_obs(),
                });
            }
        }
    }
    let winners: Vec<usize> = (0..n_rep)
        .map(|r| {
            let mut best = 0;
            for m in 1..models.len() {
                if results[m][r].value < results[best][r].value {
                    best = m;
                }
            }
            best
        })
        .collect();
    let win_frequency = (0..models.len())
        .map(|m| winners.iter().filter(|&&w| w == m).count() as f64 / n_rep as f64)
        .collect();
    let mut differences = Vec::new();
    for a in 0..models.len() {
        for b in a + 1..models.len() {
            // Later model minus earlier model, e.g. M2 - M1.
            let diffs: Vec<f64> = (0..n_rep)
                .map(|r| results[b][r].value - results[a][r].value)
                .collect();
            differences.push(PairwiseDifference {
                first: models[b].clone(),
                second: models[a].clone(),
                quartiles: [quantile(&diffs, 0.25), quantile(&diffs, 0.5), quantile(&diffs, 0.75)],
                differences: diffs,
            });
        }
    }
    Ok(ComparisonTable {
        criterion,
        models: models.to_vec(),
        winners,
        win_frequency,
        differences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn crit(value: f64, n: usize) -> CriterionResult {
        CriterionResult {
            criterion: Criterion::Looic,
            value,
            effective_params: 0.0,
            pointwise: vec![value / n as f64; n],
            pareto_k: None,
        }
    }

    #[test]
    fn waic_single_draw() {
        let ll = PointwiseLogLik::from_rows(vec![vec![-1.0, -2.5, -0.3]]);
        let w = waic(&ll);
        assert_eq!(w.effective_params, 0.0);
        assert_eq!(w.value, -2.0 * (-1.0 - 2.5 - 0.3));
    }

    #[test]
    fn waic_two_draws_by_hand() {
        let ll = PointwiseLogLik::from_rows(vec![vec![-1.0], vec![-3.0]]);
        let w = waic(&ll);
        let lppd = (((-1.0_f64).exp() + (-3.0_f64).exp()) / 2.0).ln();
        let p = 2.0; // sample variance of {-1, -3}
        assert!((w.value - (-2.0 * (lppd - p))).abs() < 1e-12);
        assert!((w.effective_params - p).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_give_exact_loo() {
        let row = vec![-1.2, -0.4, -3.3];
        let ll = PointwiseLogLik::from_rows(vec![row.clone(); 40]);
        let loo = psis_loo(&ll);
        let expected: f64 = -2.0 * row.iter().sum::<f64>();
        assert!((loo.value - expected).abs() < 1e-12);
        assert!(loo.pareto_k.unwrap().iter().all(|k| *k == f64::NEG_INFINITY));
        assert!(waic(&ll).effective_params.abs() < 1e-20);
    }

    #[test]
    fn gpd_shape_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = Uniform::new(0.0, 1.0).unwrap();
        let (k, sigma) = (0.3, 1.0);
        let mut x: Vec<f64> = (0..4000).map(|_| gpd_quantile(u.sample(&mut rng), k, sigma)).collect();
        x.sort_by(f64::total_cmp);
        let (khat, shat) = gpd_fit(&x);
        assert!((khat - k).abs() < 0.15, "{khat}");
        assert!((shat - sigma).abs() < 0.2, "{shat}");
    }

    #[test]
    fn loo_never_exceeds_lppd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Uniform::new(-6.0, 0.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..5).map(|_| u.sample(&mut rng)).collect()).collect();
        let ll = PointwiseLogLik::from_rows(rows);
        let loo = psis_loo(&ll);
        for (i, l) in lppd(&ll).iter().enumerate() {
            assert!(-0.5 * loo.pointwise[i] <= l + 1e-6);
        }
    }

    #[test]
    fn raw_importance_sampling_below_five_draws() {
        let ll = PointwiseLogLik::from_rows(vec![vec![-1.0], vec![-2.0], vec![-0.5]]);
        let loo = psis_loo(&ll);
        // Raw IS gives the harmonic mean of the likelihoods.
        let hm = 3.0 / [1.0_f64, 2.0, 0.5].iter().map(|v| v.exp()).sum::<f64>();
        assert!((loo.value + 2.0 * hm.ln()).abs() < 1e-12);
        assert!(loo.pareto_k.unwrap()[0].is_nan());
    }

    #[test]
    fn compare_ties_and_quartiles() {
        let models = vec!["M1".to_string(), "M2".to_string()];
        let same = vec![vec![crit(10.0, 4), crit(12.0, 4)], vec![crit(10.0, 4), crit(12.0, 4)]];
        let t = compare(&models, &same).unwrap();
        assert_eq!(t.winners, vec![0, 0]);
        assert!(t.differences[0].differences.iter().all(|d| *d == 0.0));

        let a = vec![crit(100.0, 4), crit(50.0, 4), crit(80.0, 4)];
        let b = vec![crit(90.0, 4), crit(55.0, 4), crit(60.0, 4)];
        let t = compare(&models, &[a, b]).unwrap();
        assert_eq!(t.winners, vec![1, 0, 1]);
        assert_eq!(t.differences[0].differences, vec![-10.0, 5.0, -20.0]);
        // Sorted {-20, -10, 5}: linear interpolation at 0.25 -> -15, 0.5 -> -10, 0.75 -> -2.5.
        assert_eq!(t.differences[0].quartiles, [-15.0, -10.0, -2.5]);
        assert!((t.win_frequency[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn compare_rejects_mismatched_observations() {
        let models = vec!["LTJMM".to_string(), "MM".to_string()];
        let err = compare(&models, &[vec![crit(1.0, 3)], vec![crit(1.0, 4)]]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("LTJMM") && msg.contains("MM"));
    }
}
