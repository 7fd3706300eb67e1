//! Joint log posterior of the latent time joint mixed-effects model and its
//! analytic gradient in unconstrained coordinates.
//!
//! Coordinates follow [`ParameterLayout`]:
//!
//! - `beta` is unconstrained;
//! - `gamma` and every standard deviation are stored as logs;
//! - per-subject effects are stored either directly (centered) or as
//!   standard-normal `z` mapped through their scales (`sigma * z`), or through
//!   `Lambda * L * z` for the joint random-effect vector under the
//!   multivariate variant (non-centered), as chosen by [`Parameterization`];
//! - the correlation factor `L` is stored as canonical partial correlations
//!   passed through `atanh`.

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use statrs::function::beta::ln_beta;

use crate::model_spec::{Block, Dataset, ModelConfig, Parameterization, ParameterLayout, ParameterSet, RandomEffects};
use crate::sampler::LogDensity;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Result of one density evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityResult {
    pub log_density: f64,
    pub gradient: Vec<f64>,
}

impl DensityResult {
    /// False when the density or any gradient entry is NaN or infinite; the
    /// sampler treats such points as rejected.
    pub fn is_finite(&self) -> bool {
        self.log_density.is_finite() && self.gradient.iter().all(|g| g.is_finite())
    }
}

/// Maps canonical partial correlations (after `tanh`) onto the Cholesky factor
/// of a `k x k` correlation matrix. Returns the factor and the log Jacobian of
/// the map from the unconstrained coordinates.
pub fn cholesky_corr_constrain(free: &[f64], k: usize) -> (DMatrix<f64>, f64) {
    debug_assert_eq!(free.len(), k * k.saturating_sub(1) / 2);
    let mut l = DMatrix::zeros(k, k);
    let mut log_jac = 0.0;
    if k == 0 {
        return (l, 0.0);
    }
    l[(0, 0)] = 1.0;
    let mut idx = 0;
    for i in 1..k {
        let z = free[idx].tanh();
        log_jac += ln_one_minus_tanh_sq(free[idx]);
        idx += 1;
        l[(i, 0)] = z;
        let mut sum_sq = z * z;
        for j in 1..i {
            let z = free[idx].tanh();
            log_jac += ln_one_minus_tanh_sq(free[idx]);
            idx += 1;
            log_jac += 0.5 * (1.0 - sum_sq).ln();
            let x = z * (1.0 - sum_sq).sqrt();
            l[(i, j)] = x;
            sum_sq += x * x;
        }
        l[(i, i)] = (1.0 - sum_sq).max(0.0).sqrt();
    }
    (l, log_jac)
}

/// Inverse of [`cholesky_corr_constrain`].
pub fn cholesky_corr_free(l: &DMatrix<f64>) -> Vec<f64> {
    let k = l.nrows();
    let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for i in 1..k {
        let mut sum_sq = 0.0_f64;
        for j in 0..i {
            let x = l[(i, j)];
            let z = if j == 0 { x } else { x / (1.0 - sum_sq).sqrt() };
            out.push(z.atanh());
            sum_sq += x * x;
        }
    }
    out
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
fn ln_one_minus_tanh_sq(u: f64) -> f64 {
    let a = u.abs();
    LN_2 + LN_2 - 2.0 * a - 2.0 * (-2.0 * a).exp().ln_1p()
}

/// Log normalizing constant of the LKJ density over `k x k` correlation matrices.
pub fn lkj_log_normalizer(k: usize, eta: f64) -> f64 {
    let kf = k as f64;
    (1..k)
        .map(|i| {
            let m = kf - i as f64;
            let b = eta + (m - 1.0) / 2.0;
            (2.0 * eta - 2.0 + m) * m * LN_2 + m * ln_beta(b, b)
        })
        .sum()
}

/// LKJ(eta) log density of the Cholesky factor `l`, including the Jacobian of
/// `Omega = L L'` and the normalizing constant.
pub fn lkj_cholesky_log_density(l: &DMatrix<f64>, eta: f64) -> f64 {
    let k = l.nrows();
    let mut lp = -lkj_log_normalizer(k, eta);
    for r in 1..k {
        lp += lkj_diag_coefficient(k, r, eta) * l[(r, r)].ln();
    }
    lp
}

fn lkj_diag_coefficient(k: usize, r: usize, eta: f64) -> f64 {
    (k - r - 1) as f64 + 2.0 * (eta - 1.0)
}

/// Log density of half-Cauchy(0, scale) at `x >= 0`.
pub fn half_cauchy_log_density(x: f64, scale: f64) -> f64 {
    (2.0 / (PI * scale)).ln() - (x / scale).powi(2).ln_1p()
}

/// Log density of N(0, variance) truncated below at 0.
pub fn half_normal_log_density(x: f64, variance: f64) -> f64 {
    LN_2 + normal_log_density(x, variance)
}

pub fn normal_log_density(x: f64, variance: f64) -> f64 {
    -0.5 * (2.0 * PI * variance).ln() - x * x / (2.0 * variance)
}

/// Reconstructs constrained parameters from an unconstrained point and
/// returns the log Jacobian of the transform.
pub fn from_unconstrained(coords: &[f64], layout: &ParameterLayout) -> (ParameterSet, f64) {
    assert_eq!(coords.len(), layout.total_dim, "coordinate vector length");
    let (p, d) = (layout.p, layout.d);
    let block = |b: Block| &coords[layout.range(b)];
    let mut log_jac = 0.0;
    let mut exp_block = |b: Block| -> Vec<f64> {
        block(b)
            .iter()
            .map(|&u| {
                log_jac += u;
                u.exp()
            })
            .collect()
    };
    let gamma = exp_block(Block::Gamma);
    let sigma = exp_block(Block::Sigma);
    let sigma_delta = exp_block(Block::SigmaDelta).first().copied().unwrap_or(0.0);
    let sigma_alpha0 = exp_block(Block::SigmaAlpha0);
    let sigma_alpha1 = exp_block(Block::SigmaAlpha1);

    let (delta, alpha0_free, alpha1, corr_chol) = decode_effects(
        coords,
        layout,
        block(Block::Beta),
        &gamma,
        sigma_delta,
        &sigma_alpha0,
        &sigma_alpha1,
        &mut log_jac,
    );

    let params = ParameterSet {
        p,
        d,
        latent_time: layout.latent_time,
        beta: block(Block::Beta).to_vec(),
        gamma,
        sigma,
        sigma_delta,
        sigma_alpha0,
        sigma_alpha1,
        corr_chol,
        delta,
        alpha0_free,
        alpha1,
    };
    (params, log_jac)
}

/// Subject effects `(delta, alpha0_free, alpha1)` and the correlation factor
/// encoded by the effect and correlation blocks of `coords`. Adds the log
/// Jacobians of the correlation map and of the hierarchical level map.
#[allow(clippy::too_many_arguments)]
fn decode_effects(
    coords: &[f64],
    layout: &ParameterLayout,
    beta: &[f64],
    gamma: &[f64],
    sigma_delta: f64,
    sigma_alpha0: &[f64],
    sigma_alpha1: &[f64],
    log_jac: &mut f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Option<DMatrix<f64>>) {
    let (n, p) = (layout.n, layout.p);
    let m = layout.free_intercepts();
    let kdim = layout.effect_dim();
    let latent = layout.latent_time;
    let zd = &coords[layout.range(Block::Delta)];
    let z0 = &coords[layout.range(Block::Alpha0)];
    let z1 = &coords[layout.range(Block::Alpha1)];
    let corr_chol = (layout.random_effects == RandomEffects::Multivariate).then(|| {
        let (l, lj) = cholesky_corr_constrain(&coords[layout.range(Block::Corr)], kdim);
        *log_jac += lj;
        l
    });
    let mut delta = vec![0.0; if latent { n } else { 0 }];
    let mut alpha0_free = vec![0.0; n * m];
    let mut alpha1 = vec![0.0; n * p];
    match layout.parameterization {
        Parameterization::NonCentered => {
            for (d, z) in delta.iter_mut().zip(zd) {
                *d = sigma_delta * z;
            }
            let scales: Vec<f64> = sigma_alpha0.iter().chain(sigma_alpha1).copied().collect();
            for i in 0..n {
                for a in 0..kdim {
                    let w = match &corr_chol {
                        Some(l) => (0..=a)
                            .map(|b| l[(a, b)] * effect_coordinate(z0, z1, m, p, i, b))
                            .sum(),
                        None => effect_coordinate(z0, z1, m, p, i, a),
                    };
                    let v = scales[a] * w;
                    if a < m {
                        alpha0_free[i * m + a] = v;
                    } else {
                        alpha1[i * p + a - m] = v;
                    }
                }
            }
        }
        Parameterization::Centered => {
            delta.copy_from_slice(zd);
            alpha0_free.copy_from_slice(z0);
            alpha1.copy_from_slice(z1);
        }
        Parameterization::Hierarchical => {
            let offsets: Vec<f64> = (0..p).map(|k| layout.level_offset(beta, k)).collect();
            let g_sum: f64 = gamma.iter().sum();
            if latent {
                *log_jac -= n as f64 * g_sum.ln();
            }
            for i in 0..n {
                let level = |k: usize| if k < m { z0[i * m + k] } else { zd[i] };
                if latent {
                    delta[i] = (0..p).map(|k| level(k) - offsets[k]).sum::<f64>() / g_sum;
                }
                let di = delta.get(i).copied().unwrap_or(0.0);
                for k in 0..m {
                    let g = gamma.get(k).copied().unwrap_or(0.0);
                    alpha0_free[i * m + k] = level(k) - offsets[k] - g * di;
                }
                for k in 0..p {
                    let g = gamma.get(k).copied().unwrap_or(0.0);
                    alpha1[i * p + k] = z1[i * p + k] - g;
                }
            }
        }
    }
    (delta, alpha0_free, alpha1, corr_chol)
}

/// Entry `a` of subject `i`'s joint effect vector (free intercepts, then
/// slopes) read from the alpha0 and alpha1 blocks.
#[inline]
fn effect_coordinate(z0: &[f64], z1: &[f64], m: usize, p: usize, i: usize, a: usize) -> f64 {
    if a < m {
        z0[i * m + a]
    } else {
        z1[i * p + a - m]
    }
}

/// Standard-normal auxiliaries `(z_delta, z_alpha0, z_alpha1)` that generate
/// the subject effects of `params`.
pub fn standardized_effects(params: &ParameterSet, layout: &ParameterLayout) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, p) = (layout.n, layout.p);
    let m = layout.free_intercepts();
    let zd = params.delta.iter().map(|d| d / params.sigma_delta).collect();
    let mut z0 = vec![0.0; n * m];
    let mut z1 = vec![0.0; n * p];
    match layout.random_effects {
        RandomEffects::Univariate => {
            for i in 0..n {
                for k in 0..m {
                    z0[i * m + k] = params.alpha0_free[i * m + k] / params.sigma_alpha0[k];
                }
                for k in 0..p {
                    z1[i * p + k] = params.alpha1[i * p + k] / params.sigma_alpha1[k];
                }
            }
        }
        RandomEffects::Multivariate => {
            let kdim = layout.effect_dim();
            let l = params
                .corr_chol
                .clone()
                .unwrap_or_else(|| DMatrix::identity(kdim, kdim));
            let scales: Vec<f64> = params
                .sigma_alpha0
                .iter()
                .chain(&params.sigma_alpha1)
                .copied()
                .collect();
            for i in 0..n {
                let w: DVector<f64> = DVector::from_fn(kdim, |a, _| {
                    let v = if a < m {
                        params.alpha0_free[i * m + a]
                    } else {
                        params.alpha1[i * p + a - m]
                    };
                    v / scales[a]
                });
                let z = l
                    .solve_lower_triangular(&w)
                    .unwrap_or_else(|| DVector::from_element(kdim, f64::NAN));
                for a in 0..kdim {
                    if a < m {
                        z0[i * m + a] = z[a];
                    } else {
                        z1[i * p + a - m] = z[a];
                    }
                }
            }
        }
    }
    (zd, z0, z1)
}

/// Values stored in the delta, alpha0 and alpha1 coordinate blocks under the
/// layout's [`Parameterization`].
pub fn effect_coordinates(params: &ParameterSet, layout: &ParameterLayout) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    match layout.parameterization {
        Parameterization::NonCentered => standardized_effects(params, layout),
        Parameterization::Centered => (params.delta.clone(), params.alpha0_free.clone(), params.alpha1.clone()),
        Parameterization::Hierarchical => {
            let (n, p) = (layout.n, layout.p);
            let m = layout.free_intercepts();
            let level =
                |i: usize, k: usize| layout.level_offset(&params.beta, k) + params.gamma(k) * params.delta(i) + params.alpha0(i, k);
            let mut last = Vec::new();
            let mut levels = Vec::with_capacity(n * m);
            let mut slopes = Vec::with_capacity(n * p);
            for i in 0..n {
                levels.extend((0..m).map(|k| level(i, k)));
                if layout.latent_time {
                    last.push(level(i, p - 1));
                }
                slopes.extend((0..p).map(|k| params.gamma(k) + params.alpha1(i, k)));
            }
            (last, levels, slopes)
        }
    }
}

/// Inverse of [`from_unconstrained`].
pub fn to_unconstrained(params: &ParameterSet, layout: &ParameterLayout) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.total_dim);
    out.extend_from_slice(&params.beta);
    out.extend(params.gamma.iter().map(|g| g.ln()));
    out.extend(params.sigma.iter().map(|s| s.ln()));
    if layout.latent_time {
        out.push(params.sigma_delta.ln());
    }
    out.extend(params.sigma_alpha0.iter().map(|s| s.ln()));
    out.extend(params.sigma_alpha1.iter().map(|s| s.ln()));
    let (zd, z0, z1) = effect_coordinates(params, layout);
    out.extend(zd);
    out.extend(z0);
    out.extend(z1);
    if layout.random_effects == RandomEffects::Multivariate {
        let kdim = layout.effect_dim();
        match &params.corr_chol {
            Some(l) => out.extend(cholesky_corr_free(l)),
            None => out.extend(std::iter::repeat_n(0.0, kdim * (kdim - 1) / 2)),
        }
    }
    out
}

/// Linear predictor for one observation.
#[inline]
pub fn linear_predictor(
    params: &ParameterSet,
    subject: usize,
    outcome: usize,
    time: f64,
    covariates: &[f64],
) -> f64 {
    let xb: f64 = params
        .beta_row(outcome)
        .iter()
        .zip(covariates)
        .map(|(b, x)| b * x)
        .sum();
    xb + params.gamma(outcome) * (time + params.delta(subject))
        + params.alpha0(subject, outcome)
        + params.alpha1(subject, outcome) * time
}

/// Gaussian log density of every observation, in dataset row order.
pub fn pointwise_log_likelihood(params: &ParameterSet, dataset: &Dataset) -> Vec<f64> {
    dataset
        .observations
        .iter()
        .map(|obs| {
            let eta = linear_predictor(params, obs.subject, obs.outcome, obs.time, &obs.covariates);
            let s = params.sigma[obs.outcome];
            let e = obs.value - eta;
            -HALF_LN_2PI - s.ln() - 0.5 * e * e / (s * s)
        })
        .collect()
}

pub fn log_likelihood(params: &ParameterSet, dataset: &Dataset) -> f64 {
    pointwise_log_likelihood(params, dataset).iter().sum()
}

/// Log prior of the constrained parameters. Subject effects contribute the
/// standard-normal density of their auxiliaries when non-centered and their
/// Gaussian random-effect density otherwise. The change of variables from
/// levels to shifts under hierarchical centering is part of the Jacobian
/// returned by [`from_unconstrained`], not of this prior.
pub fn log_prior(params: &ParameterSet, layout: &ParameterLayout, config: &ModelConfig) -> f64 {
    let v = config.prior_variance_fixed;
    let hc = config.prior_scale_half_cauchy;
    let mut lp: f64 = params.beta.iter().map(|&b| normal_log_density(b, v)).sum();
    lp += params
        .gamma
        .iter()
        .map(|&g| {
            if g > 0.0 {
                half_normal_log_density(g, v)
            } else {
                f64::NEG_INFINITY
            }
        })
        .sum::<f64>();
    let sds = params
        .sigma
        .iter()
        .chain(layout.latent_time.then_some(&params.sigma_delta))
        .chain(&params.sigma_alpha0)
        .chain(&params.sigma_alpha1);
    for &s in sds {
        lp += if s > 0.0 {
            half_cauchy_log_density(s, hc)
        } else {
            f64::NEG_INFINITY
        };
    }
    if layout.random_effects == RandomEffects::Multivariate {
        let kdim = layout.effect_dim();
        let l = params
            .corr_chol
            .clone()
            .unwrap_or_else(|| DMatrix::identity(kdim, kdim));
        lp += lkj_cholesky_log_density(&l, config.lkj_shape);
    }
    let (zd, z0, z1) = standardized_effects(params, layout);
    lp += zd
        .iter()
        .chain(&z0)
        .chain(&z1)
        .map(|z| -HALF_LN_2PI - 0.5 * z * z)
        .sum::<f64>();
    let n = layout.n as f64;
    if layout.parameterization != Parameterization::NonCentered {
        if layout.latent_time {
            lp -= n * params.sigma_delta.ln();
        }
        let mut log_det: f64 = params.sigma_alpha0.iter().chain(&params.sigma_alpha1).map(|s| s.ln()).sum();
        if let Some(l) = &params.corr_chol {
            log_det += l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        lp -= n * log_det;
    }
    lp
}

/// Per-observation data in struct-of-arrays form for the gradient loop.
#[derive(Debug, Clone)]
struct Rows {
    subject: Vec<usize>,
    outcome: Vec<usize>,
    time: Vec<f64>,
    value: Vec<f64>,
    /// Row-major `rows x d`, masked covariates zeroed.
    x: Vec<f64>,
}

/// The log posterior of one model on one dataset, ready for repeated
/// evaluation by the sampler.
#[derive(Debug, Clone)]
pub struct Posterior {
    layout: ParameterLayout,
    config: ModelConfig,
    rows: Rows,
    lkj_normalizer: f64,
}

impl Posterior {
    pub fn new(dataset: &Dataset, config: &ModelConfig) -> crate::Result<Self> {
        let (n, p, d) = (dataset.n_subjects(), dataset.n_outcomes(), dataset.n_covariates());
        config.validate(p, d)?;
        let mut layout = crate::model_spec::layout(config, n, p, d)?;
        let masked = apply_covariate_mask(dataset, config);
        layout.intercept_columns = intercept_columns(&masked, config);
        let rows = Rows {
            subject: masked.observations.iter().map(|o| o.subject).collect(),
            outcome: masked.observations.iter().map(|o| o.outcome).collect(),
            time: masked.observations.iter().map(|o| o.time).collect(),
            value: masked.observations.iter().map(|o| o.value).collect(),
            x: masked
                .observations
                .iter()
                .flat_map(|o| o.covariates.iter().copied())
                .collect(),
        };
        let lkj_normalizer = lkj_log_normalizer(layout.effect_dim(), config.lkj_shape);
        Ok(Self {
            layout,
            config: config.clone(),
            rows,
            lkj_normalizer,
        })
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn evaluate(&self, coords: &[f64]) -> DensityResult {
        let mut gradient = vec![0.0; self.layout.total_dim];
        let log_density = self.log_density_gradient(coords, &mut gradient);
        DensityResult {
            log_density,
            gradient,
        }
    }

    /// Log posterior (likelihood + prior + log Jacobian) at `coords`; writes
    /// its gradient into `grad`.
    pub fn log_density_gradient(&self, coords: &[f64], grad: &mut [f64]) -> f64 {
        let lay = &self.layout;
        let (n, p, d) = (lay.n, lay.p, lay.d);
        let m = lay.free_intercepts();
        let kdim = lay.effect_dim();
        let latent = lay.latent_time;
        let par = lay.parameterization;
        assert_eq!(coords.len(), lay.total_dim);
        assert_eq!(grad.len(), lay.total_dim);
        grad.fill(0.0);

        let r_beta = lay.range(Block::Beta);
        let r_gamma = lay.range(Block::Gamma);
        let r_sigma = lay.range(Block::Sigma);
        let r_sd = lay.range(Block::SigmaDelta);
        let r_s0 = lay.range(Block::SigmaAlpha0);
        let r_s1 = lay.range(Block::SigmaAlpha1);
        let r_zd = lay.range(Block::Delta);
        let r_z0 = lay.range(Block::Alpha0);
        let r_z1 = lay.range(Block::Alpha1);

        let beta = &coords[r_beta.clone()];
        let gamma_raw: Vec<f64> = coords[r_gamma.clone()].iter().map(|u| u.exp()).collect();
        let sigma: Vec<f64> = coords[r_sigma.clone()].iter().map(|u| u.exp()).collect();
        let sd = coords[r_sd.clone()].first().map_or(0.0, |u| u.exp());
        let s0: Vec<f64> = coords[r_s0.clone()].iter().map(|u| u.exp()).collect();
        let s1: Vec<f64> = coords[r_s1.clone()].iter().map(|u| u.exp()).collect();
        let scales: Vec<f64> = s0.iter().chain(&s1).copied().collect();
        let ln_scales: Vec<f64> = coords[r_s0.clone()].iter().chain(&coords[r_s1.clone()]).copied().collect();
        let scale_index = |a: usize| if a < m { r_s0.start + a } else { r_s1.start + a - m };
        let effect_index = |i: usize, a: usize| {
            if a < m {
                r_z0.start + i * m + a
            } else {
                r_z1.start + i * p + a - m
            }
        };

        // Jacobian of the exponential maps.
        let mut lp: f64 = coords[r_gamma.start..r_s1.end].iter().sum();
        for g in &mut grad[r_gamma.start..r_s1.end] {
            *g = 1.0;
        }

        let mut log_jac = 0.0;
        let (delta, a0, a1, corr) = decode_effects(coords, lay, beta, &gamma_raw, sd, &s0, &s1, &mut log_jac);
        lp += log_jac;
        let gamma = if latent { gamma_raw } else { vec![0.0; p] };
        let delta = if latent { delta } else { vec![0.0; n] };

        // Likelihood.
        let ln_sigma = &coords[r_sigma.clone()];
        let inv_var: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
        let mut g_beta = vec![0.0; p * d];
        let mut g_gamma = vec![0.0; p];
        let mut g_delta = vec![0.0; n];
        let mut g_a0 = vec![0.0; n * p];
        let mut g_a1 = vec![0.0; n * p];
        let mut ll = 0.0;
        let rows = &self.rows;
        for r in 0..rows.value.len() {
            let i = rows.subject[r];
            let k = rows.outcome[r];
            let t = rows.time[r];
            let x = &rows.x[r * d..(r + 1) * d];
            let bk = &beta[k * d..(k + 1) * d];
            let mut eta = 0.0;
            for j in 0..d {
                eta += bk[j] * x[j];
            }
            let alpha0 = if k < m {
                a0[i * m + k]
            } else {
                -a0[i * m..(i + 1) * m].iter().sum::<f64>()
            };
            eta += gamma[k] * (t + delta[i]) + alpha0 + a1[i * p + k] * t;
            let e = rows.value[r] - eta;
            let e2 = e * e * inv_var[k];
            ll += -HALF_LN_2PI - ln_sigma[k] - 0.5 * e2;
            let g = e * inv_var[k];
            let gb = &mut g_beta[k * d..(k + 1) * d];
            for j in 0..d {
                gb[j] += g * x[j];
            }
            if latent {
                g_gamma[k] += g * (t + delta[i]);
                g_delta[i] += g * gamma[k];
            }
            g_a0[i * p + k] += g;
            g_a1[i * p + k] += g * t;
            grad[r_sigma.start + k] += e2 - 1.0;
        }
        lp += ll;

        // Priors on population parameters.
        let v = self.config.prior_variance_fixed;
        let hc = self.config.prior_scale_half_cauchy;
        let ln_norm = -0.5 * (2.0 * PI * v).ln();
        for (j, &b) in beta.iter().enumerate() {
            lp += ln_norm - b * b / (2.0 * v);
            g_beta[j] -= b / v;
        }
        if latent {
            for k in 0..p {
                let g = gamma[k];
                lp += LN_2 + ln_norm - g * g / (2.0 * v);
                g_gamma[k] -= g / v;
            }
        }
        let hc_const = (2.0 / (PI * hc)).ln();
        let hc2 = hc * hc;
        let mut half_cauchy = |idx: usize, s: f64| {
            let s2 = s * s;
            lp += hc_const - (s2 / hc2).ln_1p();
            grad[idx] -= 2.0 * s2 / (hc2 + s2);
        };
        for k in 0..p {
            half_cauchy(r_sigma.start + k, sigma[k]);
        }
        for a in 0..kdim {
            half_cauchy(scale_index(a), scales[a]);
        }
        if latent {
            half_cauchy(r_sd.start, sd);
        }

        // Correlation prior.
        let mut g_l = DMatrix::zeros(kdim, kdim);
        if let Some(l) = &corr {
            lp -= self.lkj_normalizer;
            for r in 1..kdim {
                let c = lkj_diag_coefficient(kdim, r, self.config.lkj_shape);
                lp += c * l[(r, r)].ln();
                g_l[(r, r)] += c / l[(r, r)];
            }
        }

        // Fold the dependent intercept, if any, into the free ones; from here
        // on g_eff holds the gradient with respect to each subject's joint
        // effect vector (free intercepts, then slopes).
        let mut g_eff = vec![0.0; n * kdim];
        for i in 0..n {
            let last = if m < p { g_a0[i * p + m] } else { 0.0 };
            for k in 0..m {
                g_eff[i * kdim + k] = g_a0[i * p + k] - last;
            }
            g_eff[i * kdim + m..(i + 1) * kdim].copy_from_slice(&g_a1[i * p..(i + 1) * p]);
        }
        let effect = |i: usize, a: usize| if a < m { a0[i * m + a] } else { a1[i * p + a - m] };

        if par == Parameterization::NonCentered {
            if latent {
                let mut g_lnsd = 0.0;
                for i in 0..n {
                    let z = coords[r_zd.start + i];
                    lp += -HALF_LN_2PI - 0.5 * z * z;
                    grad[r_zd.start + i] += g_delta[i] * sd - z;
                    g_lnsd += g_delta[i] * delta[i];
                }
                grad[r_sd.start] += g_lnsd;
            }
            let mut z = vec![0.0; kdim];
            let mut gw = vec![0.0; kdim];
            for i in 0..n {
                for a in 0..kdim {
                    let idx = effect_index(i, a);
                    z[a] = coords[idx];
                    lp += -HALF_LN_2PI - 0.5 * z[a] * z[a];
                    grad[idx] -= z[a];
                    let ge = g_eff[i * kdim + a];
                    grad[scale_index(a)] += ge * effect(i, a);
                    gw[a] = ge * scales[a];
                }
                match &corr {
                    None => {
                        for a in 0..kdim {
                            grad[effect_index(i, a)] += gw[a];
                        }
                    }
                    Some(l) => {
                        for b in 0..kdim {
                            let mut gz = 0.0;
                            for a in b..kdim {
                                gz += l[(a, b)] * gw[a];
                                g_l[(a, b)] += gw[a] * z[b];
                            }
                            grad[effect_index(i, b)] += gz;
                        }
                    }
                }
            }
        } else {
            // Random-effect densities on the effects themselves.
            if latent {
                for i in 0..n {
                    let u = delta[i] / sd;
                    lp += -HALF_LN_2PI - 0.5 * u * u - coords[r_sd.start];
                    g_delta[i] -= u / sd;
                    grad[r_sd.start] += u * u - 1.0;
                }
            }
            match &corr {
                None => {
                    for i in 0..n {
                        for a in 0..kdim {
                            let u = effect(i, a) / scales[a];
                            lp += -HALF_LN_2PI - 0.5 * u * u - ln_scales[a];
                            g_eff[i * kdim + a] -= u / scales[a];
                            grad[scale_index(a)] += u * u - 1.0;
                        }
                    }
                }
                Some(l) => {
                    // Multivariate normal through w = L^-1 (v / scales).
                    let log_det = ln_scales.iter().sum::<f64>() + (0..kdim).map(|a| l[(a, a)].ln()).sum::<f64>();
                    lp -= n as f64 * log_det;
                    for a in 0..kdim {
                        grad[scale_index(a)] -= n as f64;
                        g_l[(a, a)] -= n as f64 / l[(a, a)];
                    }
                    let mut u = vec![0.0; kdim];
                    let mut w = vec![0.0; kdim];
                    let mut gu = vec![0.0; kdim];
                    for i in 0..n {
                        for a in 0..kdim {
                            u[a] = effect(i, a) / scales[a];
                        }
                        for a in 0..kdim {
                            let mut acc = u[a];
                            for b in 0..a {
                                acc -= l[(a, b)] * w[b];
                            }
                            w[a] = acc / l[(a, a)];
                            lp += -HALF_LN_2PI - 0.5 * w[a] * w[a];
                        }
                        // gu = -L^-T w.
                        for a in (0..kdim).rev() {
                            let mut acc = -w[a];
                            for b in a + 1..kdim {
                                acc -= l[(b, a)] * gu[b];
                            }
                            gu[a] = acc / l[(a, a)];
                        }
                        for a in 0..kdim {
                            for b in 0..=a {
                                g_l[(a, b)] -= gu[a] * w[b];
                            }
                            g_eff[i * kdim + a] += gu[a] / scales[a];
                            grad[scale_index(a)] -= gu[a] * u[a];
                        }
                    }
                }
            }

            if par == Parameterization::Centered {
                for i in 0..n {
                    if latent {
                        grad[r_zd.start + i] += g_delta[i];
                    }
                    for a in 0..kdim {
                        grad[effect_index(i, a)] += g_eff[i * kdim + a];
                    }
                }
            } else {
                // Hierarchical centering: levels c_ik and slopes b_ik with
                // delta_i = sum_k (c_ik - beta_k0) / sum(gamma),
                // alpha0_ik = c_ik - beta_k0 - gamma_k delta_i,
                // alpha1_ik = b_ik - gamma_k.
                let g_sum: f64 = gamma.iter().sum();
                let mut g_offset = vec![0.0; p];
                for i in 0..n {
                    let g_shift = if latent {
                        g_delta[i] - (0..m).map(|k| gamma[k] * g_eff[i * kdim + k]).sum::<f64>()
                    } else {
                        0.0
                    };
                    let via_shift = if latent { g_shift / g_sum } else { 0.0 };
                    for k in 0..m {
                        let g = g_eff[i * kdim + k] + via_shift;
                        grad[r_z0.start + i * m + k] += g;
                        g_offset[k] -= g;
                        g_gamma[k] -= delta[i] * g_eff[i * kdim + k];
                    }
                    if latent {
                        grad[r_zd.start + i] += via_shift;
                        g_offset[p - 1] -= via_shift;
                        for g in &mut g_gamma {
                            *g -= via_shift * delta[i];
                        }
                    }
                    for k in 0..p {
                        let g = g_eff[i * kdim + m + k];
                        grad[r_z1.start + i * p + k] += g;
                        g_gamma[k] -= g;
                    }
                }
                if latent {
                    for g in &mut g_gamma {
                        *g -= n as f64 / g_sum;
                    }
                }
                for (k, g) in g_offset.iter().enumerate() {
                    if let Some(j) = lay.intercept_columns[k] {
                        g_beta[k * d + j] += g;
                    }
                }
            }
        }

        for (j, g) in g_beta.iter().enumerate() {
            grad[r_beta.start + j] += g;
        }
        if latent {
            for k in 0..p {
                grad[r_gamma.start + k] += g_gamma[k] * gamma[k];
            }
        }
        if let Some(l) = &corr {
            let r_corr = lay.range(Block::Corr);
            cholesky_corr_reverse(&coords[r_corr.clone()], l, &g_l, &mut grad[r_corr]);
        }
        lp
    }
}

/// Reverse pass through [`cholesky_corr_constrain`]: accumulates into `grad`
/// the derivative of `sum(g_l .* L) + log_jacobian` with respect to the free
/// coordinates.
fn cholesky_corr_reverse(free: &[f64], l: &DMatrix<f64>, g_l: &DMatrix<f64>, grad: &mut [f64]) {
    let k = l.nrows();
    let mut start = 0;
    for i in 1..k {
        let u = &free[start..start + i];
        let z: Vec<f64> = u.iter().map(|v| v.tanh()).collect();
        // Forward quantities: s[j] = sum of squares through column j,
        // w[j] = sqrt(1 - s[j-1]) for j >= 1.
        let mut s = vec![0.0; i];
        let mut w = vec![1.0; i];
        s[0] = z[0] * z[0];
        for j in 1..i {
            w[j] = (1.0 - s[j - 1]).sqrt();
            let x = z[j] * w[j];
            s[j] = s[j - 1] + x * x;
        }
        let diag = l[(i, i)];
        let mut gz = vec![0.0; i];
        // diag = sqrt(1 - s[i-1])
        let mut gs = g_l[(i, i)] * (-0.5 / diag);
        for j in (1..i).rev() {
            let x = l[(i, j)];
            let gx = g_l[(i, j)] + gs * 2.0 * x;
            gz[j] = gx * w[j];
            // log w[j] Jacobian term plus the dependence through x.
            let gw = gx * z[j] + 1.0 / w[j];
            gs += gw * (-0.5 / w[j]);
        }
        gz[0] = g_l[(i, 0)] + gs * 2.0 * l[(i, 0)];
        for j in 0..i {
            // z = tanh(u); Jacobian ln(1 - z^2).
            grad[start + j] += gz[j] * (1.0 - z[j] * z[j]) - 2.0 * z[j];
        }
        start += i;
    }
}

/// Per outcome, the first included covariate equal to one on every row of
/// that outcome.
pub fn intercept_columns(dataset: &Dataset, config: &ModelConfig) -> Vec<Option<usize>> {
    (0..dataset.n_outcomes())
        .map(|k| {
            (0..dataset.n_covariates()).find(|&j| {
                config.includes(k, j)
                    && dataset
                        .observations
                        .iter()
                        .filter(|o| o.outcome == k)
                        .all(|o| o.covariates[j] == 1.0)
            })
        })
        .collect()
}

/// Copy of `dataset` with covariates excluded by the model's mask set to zero.
pub fn apply_covariate_mask(dataset: &Dataset, config: &ModelConfig) -> Dataset {
    if config.covariate_mask.is_none() {
        return dataset.clone();
    }
    let mut out = dataset.clone();
    for obs in &mut out.observations {
        for (j, x) in obs.covariates.iter_mut().enumerate() {
            if !config.includes(obs.outcome, j) {
                *x = 0.0;
            }
        }
    }
    out
}

/// Convenience wrapper evaluating the density and gradient at one point.
pub fn log_posterior_gradient(
    coords: &[f64],
    dataset: &Dataset,
    config: &ModelConfig,
) -> crate::Result<DensityResult> {
    Ok(Posterior::new(dataset, config)?.evaluate(coords))
}

impl LogDensity for Posterior {
    fn dim(&self) -> usize {
        self.layout.total_dim
    }

    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        Posterior::log_density_gradient(self, x, grad)
    }

    fn coordinate_label(&self, index: usize) -> String {
        self.layout
            .block_of(index)
            .map(|b| b.name().to_string())
            .unwrap_or_else(|| format!("coordinate {index}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::{layout, Observation, Parameterization};

    const PARAMETERIZATIONS: [Parameterization; 3] =
        [Parameterization::NonCentered, Parameterization::Centered, Parameterization::Hierarchical];

    fn config(variant: RandomEffects, parameterization: Parameterization, latent_time: bool) -> ModelConfig {
        ModelConfig {
            parameterization,
            latent_time,
            ..ModelConfig::with_random_effects(variant)
        }
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_dataset(n: usize, p: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs = Vec::new();
        for i in 0..n {
            for k in 0..p {
                for _ in 0..3 {
                    let mut x = vec![1.0];
                    x.extend((1..d).map(|_| rng.random_range(-1.0..1.0)));
                    x.truncate(d);
                    obs.push(Observation {
                        subject: i,
                        outcome: k,
                        time: rng.random_range(0.0..5.0),
                        covariates: x,
                        value: rng.random_range(-2.0..2.0),
                    });
                }
            }
        }
        Dataset::new(
            obs,
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..p).map(|k| format!("y{k}")).collect(),
            (0..d).map(|j| format!("x{j}")).collect(),
        )
        .unwrap()
    }

    fn fd_check(config: &ModelConfig, n: usize, p: usize, d: usize, seed: u64) {
        let ds = small_dataset(n, p, d, seed);
        let post = Posterior::new(&ds, config).unwrap();
        let dim = post.layout().total_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for _ in 0..5 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let res = post.evaluate(&x);
            for i in 0..dim {
                let h = 1e-5;
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (post.evaluate(&xp).log_density - post.evaluate(&xm).log_density) / (2.0 * h);
                let err = (fd - res.gradient[i]).abs() / fd.abs().max(res.gradient[i].abs()).max(1.0);
                assert!(err < 1e-6, "coord {i} ({}): analytic {} fd {fd}", post.coordinate_label(i), res.gradient[i]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_m1() {
        for par in PARAMETERIZATIONS {
            fd_check(&config(RandomEffects::Univariate, par, true), 4, 3, 2, 11);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_m2() {
        for par in PARAMETERIZATIONS {
            fd_check(&config(RandomEffects::Multivariate, par, true), 4, 3, 2, 12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_single_outcome() {
        for par in PARAMETERIZATIONS {
            fd_check(&config(RandomEffects::Multivariate, par, true), 3, 1, 1, 13);
            fd_check(&config(RandomEffects::Univariate, par, true), 3, 1, 0, 14);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_without_latent_time() {
        for variant in [RandomEffects::Univariate, RandomEffects::Multivariate] {
            for par in PARAMETERIZATIONS {
                fd_check(&config(variant, par, false), 4, 3, 2, 15);
            }
        }
    }

    #[test]
    fn density_is_sum_of_parts() {
        for (variant, latent_time, par) in [
            (RandomEffects::Univariate, true, Parameterization::NonCentered),
            (RandomEffects::Univariate, true, Parameterization::Centered),
            (RandomEffects::Multivariate, true, Parameterization::NonCentered),
            (RandomEffects::Multivariate, true, Parameterization::Centered),
            (RandomEffects::Multivariate, true, Parameterization::Hierarchical),
            (RandomEffects::Univariate, true, Parameterization::Hierarchical),
            (RandomEffects::Univariate, false, Parameterization::Hierarchical),
            (RandomEffects::Multivariate, false, Parameterization::Centered),
        ] {
            let cfg = config(variant, par, latent_time);
            let ds = small_dataset(5, 3, 2, 3);
            let post = Posterior::new(&ds, &cfg).unwrap();
            let lay = post.layout().clone();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let x: Vec<f64> = (0..lay.total_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (params, log_jac) = from_unconstrained(&x, &lay);
            let expected = log_likelihood(&params, &ds) + log_prior(&params, &lay, &cfg) + log_jac;
            let got = post.evaluate(&x).log_density;
            assert!((expected - got).abs() < 1e-8 * expected.abs().max(1.0), "{expected} vs {got}");
        }
    }

    #[test]
    fn unconstrained_round_trip() {
        for latent_time in [true, false] {
            for par in PARAMETERIZATIONS {
                round_trip(&config(RandomEffects::Multivariate, par, latent_time));
                round_trip(&config(RandomEffects::Univariate, par, latent_time));
            }
        }
    }

    fn round_trip(cfg: &ModelConfig) {
        let mut lay = layout(cfg, 6, 3, 2).unwrap();
        lay.intercept_columns = vec![Some(0), None, Some(1)];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x: Vec<f64> = (0..lay.total_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (params, _) = from_unconstrained(&x, &lay);
            let back = to_unconstrained(&params, &lay);
            let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "round trip error {err}");
        }
    }

    #[test]
    fn zero_coordinates_give_unit_scales_and_identity_correlation() {
        let cfg = config(RandomEffects::Multivariate, Parameterization::NonCentered, true);
        let lay = layout(&cfg, 2, 3, 1).unwrap();
        let x = vec![0.0; lay.total_dim];
        let (params, log_jac) = from_unconstrained(&x, &lay);
        assert_eq!(params.sigma, vec![1.0; 3]);
        assert_eq!(params.sigma_delta, 1.0);
        assert_eq!(log_jac, 0.0);
        let l = params.corr_chol.unwrap();
        assert_eq!(l, DMatrix::identity(5, 5));
    }

    #[test]
    fn intercepts_sum_to_zero() {
        let cfg = ModelConfig::with_random_effects(RandomEffects::Multivariate);
        let lay = layout(&cfg, 8, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..lay.total_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (params, _) = from_unconstrained(&x, &lay);
        for i in 0..8 {
            let s: f64 = (0..4).map(|k| params.alpha0(i, k)).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_factor_has_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let free: Vec<f64> = (0..21).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (l, _) = cholesky_corr_constrain(&free, 7);
        for i in 0..7 {
            let norm: f64 = (0..=i).map(|j| l[(i, j)] * l[(i, j)]).sum();
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(l[(i, i)] > 0.0);
        }
    }

    #[test]
    fn half_cauchy_at_zero() {
        let v = half_cauchy_log_density(0.0, 2.5);
        assert!((v - (2.0 / (PI * 2.5)).ln()).abs() < 1e-15);
        assert!((v - (-1.367_873)).abs() < 1e-6);
    }

    #[test]
    fn lkj_uniform_gives_equal_density() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.3, 1.0, 0.5, -0.2, 0.5, 1.0]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, -0.7, 0.1, -0.7, 1.0, 0.0, 0.1, 0.0, 1.0]);
        let la = a.cholesky().unwrap().l();
        let lb = b.cholesky().unwrap().l();
        // Density over correlation matrices: strip the L-to-Omega Jacobian.
        let omega_density = |l: &DMatrix<f64>| {
            lkj_cholesky_log_density(l, 1.0) - (1..3).map(|r| (3 - r - 1) as f64 * l[(r, r)].ln()).sum::<f64>()
        };
        assert!((omega_density(&la) - omega_density(&lb)).abs() < 1e-12);
        // Volume of 3x3 correlation matrices is pi^2 / 2.
        assert!((omega_density(&la) + (PI * PI / 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn lkj_normalizer_two_by_two() {
        // Integral of (1 - r^2)^(eta - 1) over (-1, 1) is 2^(2 eta - 1) B(eta, eta).
        for eta in [0.5, 1.0, 2.0, 3.7] {
            let expected = (2.0 * eta - 1.0) * LN_2 + ln_beta(eta, eta);
            assert!((lkj_log_normalizer(2, eta) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_prior_integrates_to_one_in_free_coordinates() {
        // 3x3 case: integrate exp(LKJ + Jacobian) over the three free coordinates.
        let eta = 2.0;
        let steps = 160;
        let lim = 6.0;
        let h = 2.0 * lim / steps as f64;
        let mut total = 0.0;
        for a in 0..steps {
            for b in 0..steps {
                for c in 0..steps {
                    let u = [
                        -lim + (a as f64 + 0.5) * h,
                        -lim + (b as f64 + 0.5) * h,
                        -lim + (c as f64 + 0.5) * h,
                    ];
                    let (l, lj) = cholesky_corr_constrain(&u, 3);
                    total += (lkj_cholesky_log_density(&l, eta) + lj).exp();
                }
            }
        }
        total *= h * h * h;
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }
}
