//! Subject-level and population-level trajectories of the linear predictor.
//!
//! Subject curves are placed on the long-term axis by adding the posterior
//! mean latent time (and, optionally, baseline age) to follow-up time.
//! Population curves set every subject effect to zero and sweep the latent
//! time, with or without its contribution `gamma_k * s`.

use serde::{Deserialize, Serialize};

use crate::diagnostics::quantile_sorted;
use crate::error::{Error, Result};
use crate::model_spec::{Dataset, ModelConfig, ParameterSet};
use crate::sampler::DrawsMatrix;

/// Posterior summary of one outcome's linear predictor along an axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGrid {
    pub outcome: usize,
    pub outcome_name: String,
    pub axis: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TrajectoryGrid {
    /// Summarizes a `draws x grid` matrix with the mean and the 2.5% and
    /// 97.5% quantiles at every grid point.
    pub fn from_draws(outcome: usize, outcome_name: &str, axis: Vec<f64>, values: &[Vec<f64>]) -> Self {
        let g = axis.len();
        let mut mean = vec![0.0; g];
        let mut lower = vec![0.0; g];
        let mut upper = vec![0.0; g];
        let mut column = Vec::with_capacity(values.len());
        for j in 0..g {
            column.clear();
            column.extend(values.iter().map(|row| row[j]));
            mean[j] = column.iter().sum::<f64>() / column.len() as f64;
            column.sort_by(f64::total_cmp);
            lower[j] = quantile_sorted(&column, 0.025);
            upper[j] = quantile_sorted(&column, 0.975);
        }
        Self {
            outcome,
            outcome_name: outcome_name.to_string(),
            axis,
            mean,
            lower,
            upper,
        }
    }
}

/// Covariate values for a population curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationProfile {
    /// One value per covariate.
    pub covariates: Vec<f64>,
    /// Covariate that advances with the grid (typically age). When set, its
    /// value at grid point `s` is `covariates[column] + s`.
    pub sweep_column: Option<usize>,
    /// Added to the grid to form the reported axis, e.g. to anchor the
    /// curve at a sample mean age.
    pub axis_offset: f64,
}

impl PopulationProfile {
    pub fn fixed(covariates: Vec<f64>) -> Self {
        Self {
            covariates,
            sweep_column: None,
            axis_offset: 0.0,
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("trajectory grid is empty".into()));
    }
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::Config("trajectory grid contains non-finite values".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("trajectory grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Zeroes covariates excluded from `outcome` by the model's covariate mask,
/// whose coefficients are informed by the prior alone.
fn mask_covariates(config: &ModelConfig, outcome: usize, x: &mut [f64]) {
    for (j, v) in x.iter_mut().enumerate() {
        if !config.includes(outcome, j) {
            *v = 0.0;
        }
    }
}

/// Linear predictor of `outcome` for one subject and one draw at follow-up
/// time `t` with covariates `x`.
pub fn subject_linear_predictor(params: &ParameterSet, subject: usize, outcome: usize, t: f64, x: &[f64]) -> f64 {
    crate::posterior::linear_predictor(params, subject, outcome, t, x)
}

/// Population linear predictor at latent time `s`: subject effects at zero,
/// follow-up time zero, and the latent-time term included only when asked.
pub fn population_linear_predictor(
    params: &ParameterSet,
    profile: &PopulationProfile,
    outcome: usize,
    s: f64,
    include_latent: bool,
) -> f64 {
    let xb: f64 = params
        .beta_row(outcome)
        .iter()
        .zip(&profile.covariates)
        .enumerate()
        .map(|(j, (b, x))| {
            let x = if profile.sweep_column == Some(j) { x + s } else { *x };
            b * x
        })
        .sum();
    let latent = if include_latent { params.gamma(outcome) * s } else { 0.0 };
    xb + latent
}

/// Fitted trajectories of one subject over follow-up times `grid`.
///
/// Covariates are taken from the subject's earliest observation. When
/// `age_column` is given that covariate advances with follow-up time and its
/// baseline value is added to the axis, so the axis reads as age plus latent
/// time; otherwise the axis is follow-up time plus the posterior mean
/// latent time.
pub fn subject_trajectory(
    draws: &DrawsMatrix,
    dataset: &Dataset,
    subject_id: &str,
    grid: &[f64],
    age_column: Option<usize>,
) -> Result<Vec<TrajectoryGrid>> {
    check_grid(grid)?;
    let subject = dataset
        .subject_index(subject_id)
        .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
    if subject >= draws.layout.n {
        return Err(Error::UnknownSubject(subject_id.to_string()));
    }
    if let Some(c) = age_column {
        if c >= dataset.n_covariates() {
            return Err(Error::Config(format!("age column {c} out of range")));
        }
    }
    let baseline = dataset
        .observations
        .iter()
        .filter(|o| o.subject == subject)
        .min_by(|a, b| a.time.total_cmp(&b.time))
        .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
    let x0 = baseline.covariates.clone();
    let t0 = baseline.time;

    let sets: Vec<ParameterSet> = draws.parameter_sets().collect();
    let mean_delta = sets.iter().map(|s| s.delta(subject)).sum::<f64>() / sets.len() as f64;
    let age_at_zero = age_column.map_or(0.0, |c| x0[c] - t0);
    let axis: Vec<f64> = grid.iter().map(|t| t + mean_delta + age_at_zero).collect();

    let p = draws.layout.p;
    let mut out = Vec::with_capacity(p);
    let mut x = x0.clone();
    for k in 0..p {
        let values: Vec<Vec<f64>> = sets
            .iter()
            .map(|params| {
                grid.iter()
                    .map(|&t| {
                        x.copy_from_slice(&x0);
                        if let Some(c) = age_column {
                            x[c] = x0[c] + (t - t0);
                        }
                        mask_covariates(&draws.config, k, &mut x);
                        subject_linear_predictor(params, subject, k, t, &x)
                    })
                    .collect()
            })
            .collect();
        out.push(TrajectoryGrid::from_draws(k, &dataset.outcome_names[k], axis.clone(), &values));
    }
    Ok(out)
}

/// Population trajectories over the latent-time grid.
pub fn population_trajectory(
    draws: &DrawsMatrix,
    outcome_names: &[String],
    profile: &PopulationProfile,
    grid: &[f64],
    include_latent: bool,
) -> Result<Vec<TrajectoryGrid>> {
    check_grid(grid)?;
    let (p, d) = (draws.layout.p, draws.layout.d);
    if profile.covariates.len() != d {
        return Err(Error::Dimension(format!(
            "profile has {} covariates, model has {d}",
            profile.covariates.len()
        )));
    }
    if profile.sweep_column.is_some_and(|c| c >= d) {
        return Err(Error::Config("sweep column out of range".into()));
    }
    if outcome_names.len() != p {
        return Err(Error::Dimension(format!("{} outcome names for {p} outcomes", outcome_names.len())));
    }
    let sets: Vec<ParameterSet> = draws.parameter_sets().collect();
    let axis: Vec<f64> = grid.iter().map(|s| s + profile.axis_offset).collect();
    Ok((0..p)
        .map(|k| {
            let mut masked = profile.clone();
            mask_covariates(&draws.config, k, &mut masked.covariates);
            if masked.sweep_column.is_some_and(|c| !draws.config.includes(k, c)) {
                masked.sweep_column = None;
            }
            let values: Vec<Vec<f64>> = sets
                .iter()
                .map(|params| {
                    grid.iter()
                        .map(|&s| population_linear_predictor(params, &masked, k, s, include_latent))
                        .collect()
                })
                .collect();
            TrajectoryGrid::from_draws(k, &outcome_names[k], axis.clone(), &values)
        })
        .collect())
}
