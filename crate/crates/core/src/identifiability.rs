//! Executable identifiability checks for a model and dataset.
//!
//! Writing `a_k = gamma_k * delta + alpha0_k` for one subject, the latent
//! time and the intercepts are recovered from `a` through the linear system
//! `gamma_k * delta + alpha0_k = a_k` (k = 1..p) together with
//! `sum_k alpha0_k = 0`. For `sum_k gamma_k != 0` the unique solution is
//! `delta = sum_k a_k / sum_k gamma_k` and `alpha0_k = a_k - gamma_k * delta`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::pivoted_rank;
use crate::model_spec::{validate_dataset, Dataset, ModelConfig, Violation, RANK_TOLERANCE};

/// Tolerance for agreement between the generic solver and the closed form.
pub const SOLUTION_TOLERANCE: f64 = 1e-10;

const RANDOM_INSTANCES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub design_rank_ok: bool,
    pub time_independent_of_intercept: bool,
    pub constraint_system_unique: bool,
    /// Unknowns in the per-dataset system: `n` latent times plus `n * p`
    /// intercepts (zero latent times without latent time).
    pub unknowns: usize,
    /// Equations: `n * p` reparameterized intercepts plus `n` sum-to-zero
    /// constraints (no constraints without latent time).
    pub equations: usize,
    /// Largest discrepancy seen between the generic solution and the closed
    /// form, or in substituting a solution back into the system.
    pub max_discrepancy: f64,
    pub notes: Vec<String>,
}

impl IdentifiabilityReport {
    pub fn all_ok(&self) -> bool {
        self.design_rank_ok && self.time_independent_of_intercept && self.constraint_system_unique
    }
}

/// Solves the single-subject system with a dense LU factorization. Returns
/// `None` when the system is singular.
pub fn solve_constraint_system(gamma: &[f64], shifted_intercepts: &[f64]) -> Option<(f64, Vec<f64>)> {
    let p = gamma.len();
    assert_eq!(shifted_intercepts.len(), p);
    // Unknowns: delta, alpha0_1..alpha0_p.
    let mut a = DMatrix::zeros(p + 1, p + 1);
    let mut b = DVector::zeros(p + 1);
    for k in 0..p {
        a[(k, 0)] = gamma[k];
        a[(k, k + 1)] = 1.0;
        b[k] = shifted_intercepts[k];
    }
    for k in 0..p {
        a[(p, k + 1)] = 1.0;
    }
    if pivoted_rank(&a, RANK_TOLERANCE).rank < p + 1 {
        return None;
    }
    let x = a.lu().solve(&b)?;
    Some((x[0], x.iter().skip(1).copied().collect()))
}

/// Closed-form solution, valid when `sum(gamma) != 0`.
pub fn closed_form_solution(gamma: &[f64], shifted_intercepts: &[f64]) -> (f64, Vec<f64>) {
    let delta = shifted_intercepts.iter().sum::<f64>() / gamma.iter().sum::<f64>();
    let alpha0 = gamma
        .iter()
        .zip(shifted_intercepts)
        .map(|(g, a)| a - g * delta)
        .collect();
    (delta, alpha0)
}

/// Largest residual of `(delta, alpha0)` in the single-subject system.
pub fn system_residual(gamma: &[f64], shifted_intercepts: &[f64], delta: f64, alpha0: &[f64]) -> f64 {
    let fit = gamma
        .iter()
        .zip(alpha0)
        .zip(shifted_intercepts)
        .map(|((g, a0), a)| (g * delta + a0 - a).abs())
        .fold(0.0, f64::max);
    fit.max(alpha0.iter().sum::<f64>().abs())
}

fn outcome_design_rank(dataset: &Dataset, config: &ModelConfig, notes: &mut Vec<String>) -> bool {
    let mut ok = true;
    for k in 0..dataset.n_outcomes() {
        let rows: Vec<_> = dataset.observations.iter().filter(|o| o.outcome == k).collect();
        let cols: Vec<usize> = (0..dataset.n_covariates()).filter(|&j| config.includes(k, j)).collect();
        if rows.is_empty() {
            notes.push(format!("outcome {} has no observations", dataset.outcome_names[k]));
            ok = false;
            continue;
        }
        let width = cols.len() + 1;
        let x = DMatrix::from_fn(rows.len(), width, |r, c| {
            if c < cols.len() {
                rows[r].covariates[cols[c]]
            } else {
                rows[r].time
            }
        });
        let rank = pivoted_rank(&x, RANK_TOLERANCE);
        if rank.rank < width {
            let dependent: Vec<String> = rank.pivots[rank.rank..]
                .iter()
                .map(|&c| {
                    if c < cols.len() {
                        dataset.covariate_names[cols[c]].clone()
                    } else {
                        "time".to_string()
                    }
                })
                .collect();
            notes.push(format!(
                "design for outcome {} is rank deficient (dependent: {})",
                dataset.outcome_names[k],
                dependent.join(", ")
            ));
            ok = false;
        }
    }
    ok
}

/// Checks the rank conditions on the design, counts unknowns and equations
/// of the intercept system, and solves it on random instances.
pub fn check_identifiability(dataset: &Dataset, config: &ModelConfig) -> IdentifiabilityReport {
    let (n, p) = (dataset.n_subjects(), dataset.n_outcomes());
    let mut notes = Vec::new();

    let validation = validate_dataset(dataset);
    let mut design_rank_ok = true;
    let mut time_independent_of_intercept = true;
    for v in &validation.violations {
        match v {
            Violation::TimeCollinearWithIntercept => time_independent_of_intercept = false,
            Violation::RankDeficientDesign { .. } | Violation::TimeInCovariateSpan | Violation::EmptyDataset => {
                design_rank_ok = false
            }
            Violation::SubjectWithoutObservations(_) | Violation::NonFiniteValue { .. } => {}
        }
        notes.push(v.to_string());
    }
    if config.covariate_mask.is_some() && validation.is_valid() {
        design_rank_ok &= outcome_design_rank(dataset, config, &mut notes);
    }

    let (unknowns, equations) = if config.latent_time {
        (n + n * p, n * p + n)
    } else {
        (n * p, n * p)
    };

    let mut constraint_system_unique = true;
    let mut max_discrepancy: f64 = 0.0;
    if config.latent_time && p > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1d_e17);
        for _ in 0..RANDOM_INSTANCES {
            let gamma: Vec<f64> = (0..p).map(|_| rng.random_range(0.05..3.0)).collect();
            let shifted: Vec<f64> = (0..p).map(|_| rng.random_range(-5.0..5.0)).collect();
            let Some((delta, alpha0)) = solve_constraint_system(&gamma, &shifted) else {
                constraint_system_unique = false;
                notes.push("intercept system is singular for positive slopes".into());
                break;
            };
            let (cd, ca) = closed_form_solution(&gamma, &shifted);
            let scale = 1.0 + shifted.iter().map(|a| a.abs()).fold(0.0, f64::max);
            let gap = ca
                .iter()
                .zip(&alpha0)
                .map(|(a, b)| (a - b).abs())
                .fold((cd - delta).abs(), f64::max)
                .max(system_residual(&gamma, &shifted, delta, &alpha0));
            max_discrepancy = max_discrepancy.max(gap);
            if gap > SOLUTION_TOLERANCE * scale {
                constraint_system_unique = false;
            }
        }
        if !constraint_system_unique {
            notes.push(format!(
                "generic and closed-form solutions disagree (max discrepancy {max_discrepancy:e})"
            ));
        }
    } else if !config.latent_time {
        notes.push("latent time disabled: intercepts are identified directly and no sum-to-zero constraint applies".into());
    }
    if unknowns != equations {
        constraint_system_unique = false;
        notes.push(format!("{unknowns} unknowns but {equations} equations"));
    }

    IdentifiabilityReport {
        design_rank_ok,
        time_independent_of_intercept,
        constraint_system_unique,
        unknowns,
        equations,
        max_discrepancy,
        notes,
    }
}
