//! Data schema, model configuration and the flat parameter layout shared by
//! the posterior, the sampler and every downstream consumer of draws.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative tolerance on the pivoted-QR diagonal used for numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// One measured outcome value. Indices are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub subject: usize,
    pub outcome: usize,
    pub time: f64,
    pub covariates: Vec<f64>,
    pub value: f64,
}

/// Long-format multi-outcome longitudinal data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub subject_names: Vec<String>,
    pub outcome_names: Vec<String>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, checking that every index is in range and every row
    /// carries one value per covariate name.
    pub fn new(
        observations: Vec<Observation>,
        subject_names: Vec<String>,
        outcome_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let (n, p, d) = (subject_names.len(), outcome_names.len(), covariate_names.len());
        if p == 0 {
            return Err(Error::Dimension("dataset has no outcomes".into()));
        }
        for (row, obs) in observations.iter().enumerate() {
            if obs.subject >= n {
                return Err(Error::Dimension(format!(
                    "row {row}: subject index {} out of range (n = {n})",
                    obs.subject
                )));
            }
            if obs.outcome >= p {
                return Err(Error::Dimension(format!(
                    "row {row}: outcome index {} out of range (p = {p})",
                    obs.outcome
                )));
            }
            if obs.covariates.len() != d {
                return Err(Error::Dimension(format!(
                    "row {row}: {} covariates, expected {d}",
                    obs.covariates.len()
                )));
            }
        }
        Ok(Self {
            observations,
            subject_names,
            outcome_names,
            covariate_names,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_names.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcome_names.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Row counts q_ik, indexed `[subject * p + outcome]`.
    pub fn follow_up_counts(&self) -> Vec<usize> {
        let p = self.n_outcomes();
        let mut counts = vec![0; self.n_subjects() * p];
        for obs in &self.observations {
            counts[obs.subject * p + obs.outcome] += 1;
        }
        counts
    }

    pub fn subject_index(&self, name: &str) -> Option<usize> {
        self.subject_names.iter().position(|s| s == name)
    }
}

/// How per-subject effects are represented in the sampler's coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Every subject effect is a standard-normal `z` mapped through its scale
    /// (and correlation factor).
    NonCentered,
    /// Every subject effect is sampled on its own scale.
    Centered,
    /// Each subject is represented by its outcome levels
    /// `beta_k0 + gamma_k * delta_i + alpha0_ik` (where `beta_k0` is the
    /// coefficient of an all-ones covariate, if any) and its outcome slopes
    /// `gamma_k + alpha1_ik`. The time shift and intercepts are recovered from
    /// the levels through the sum-to-zero constraint.
    #[default]
    Hierarchical,
}

/// Random-effect distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RandomEffects {
    /// M1: independent Gaussian intercepts and slopes.
    #[serde(rename = "univariate", alias = "m1")]
    Univariate,
    /// M2: jointly Gaussian free intercepts and slopes with an LKJ-distributed correlation.
    #[serde(rename = "multivariate", alias = "m2")]
    Multivariate,
}

impl RandomEffects {
    pub fn label(self) -> &'static str {
        match self {
            RandomEffects::Univariate => "M1",
            RandomEffects::Multivariate => "M2",
        }
    }
}

impl fmt::Display for RandomEffects {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for RandomEffects {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" | "univariate" => Ok(RandomEffects::Univariate),
            "m2" | "multivariate" => Ok(RandomEffects::Multivariate),
            other => Err(Error::Config(format!("unknown random-effect variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub random_effects: RandomEffects,
    pub link: Link,
    /// Variance of the Gaussian prior on regression coefficients and latent-time slopes.
    pub prior_variance_fixed: f64,
    /// Scale of the half-Cauchy prior on every standard deviation.
    pub prior_scale_half_cauchy: f64,
    /// LKJ shape parameter.
    pub lkj_shape: f64,
    /// `covariate_mask[k][j]` excludes covariate `j` from outcome `k` when false.
    /// `None` includes every covariate for every outcome.
    pub covariate_mask: Option<Vec<Vec<bool>>>,
    /// When false the subject time shift and its slopes are dropped and every
    /// random intercept is free, giving a conventional (joint) mixed model.
    pub latent_time: bool,
    pub parameterization: Parameterization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            random_effects: RandomEffects::Univariate,
            link: Link::Identity,
            prior_variance_fixed: 100.0,
            prior_scale_half_cauchy: 2.5,
            lkj_shape: 1.0,
            covariate_mask: None,
            latent_time: true,
            parameterization: Parameterization::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_random_effects(random_effects: RandomEffects) -> Self {
        Self {
            random_effects,
            ..Self::default()
        }
    }

    pub fn validate(&self, p: usize, d: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("prior_variance_fixed", self.prior_variance_fixed)?;
        positive("prior_scale_half_cauchy", self.prior_scale_half_cauchy)?;
        positive("lkj_shape", self.lkj_shape)?;
        if let Some(mask) = &self.covariate_mask {
            if mask.len() != p || mask.iter().any(|row| row.len() != d) {
                return Err(Error::Config(format!(
                    "covariate_mask must be {p} rows of {d} flags"
                )));
            }
        }
        Ok(())
    }

    /// Short model name: `LTJMM-M1`/`LTJMM-M2` with latent time, and the
    /// conventional baselines `MM` (independent effects) or `JMM` (joint
    /// effects) without it.
    pub fn label(&self) -> String {
        match (self.latent_time, self.random_effects) {
            (true, v) => format!("LTJMM-{}", v.label()),
            (false, RandomEffects::Univariate) => "MM".into(),
            (false, RandomEffects::Multivariate) => "JMM".into(),
        }
    }

    pub fn includes(&self, outcome: usize, covariate: usize) -> bool {
        self.covariate_mask
            .as_ref()
            .is_none_or(|mask| mask[outcome][covariate])
    }
}

/// The parameter blocks in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Beta,
    Gamma,
    Sigma,
    SigmaDelta,
    SigmaAlpha0,
    SigmaAlpha1,
    Delta,
    Alpha0,
    Alpha1,
    Corr,
}

impl Block {
    pub const ALL: [Block; 10] = [
        Block::Beta,
        Block::Gamma,
        Block::Sigma,
        Block::SigmaDelta,
        Block::SigmaAlpha0,
        Block::SigmaAlpha1,
        Block::Delta,
        Block::Alpha0,
        Block::Alpha1,
        Block::Corr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Beta => "beta",
            Block::Gamma => "gamma",
            Block::Sigma => "sigma",
            Block::SigmaDelta => "sigma_delta",
            Block::SigmaAlpha0 => "sigma_alpha0",
            Block::SigmaAlpha1 => "sigma_alpha1",
            Block::Delta => "delta",
            Block::Alpha0 => "alpha0",
            Block::Alpha1 => "alpha1",
            Block::Corr => "corr",
        }
    }

    /// Population-level blocks, i.e. everything but the per-subject effects.
    pub fn is_population(self) -> bool {
        !matches!(self, Block::Delta | Block::Alpha0 | Block::Alpha1)
    }
}

/// Offsets of each parameter block inside one flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterLayout {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub random_effects: RandomEffects,
    pub latent_time: bool,
    pub parameterization: Parameterization,
    /// Per outcome, the covariate that is identically one, used to center
    /// subject levels under [`Parameterization::Hierarchical`].
    pub intercept_columns: Vec<Option<usize>>,
    ranges: [Range<usize>; 10],
    pub total_dim: usize,
}

/// Computes the flat layout for a model with `n` subjects, `p` outcomes and
/// `d` covariates.
pub fn layout(config: &ModelConfig, n: usize, p: usize, d: usize) -> Result<ParameterLayout> {
    if p == 0 {
        return Err(Error::Dimension("at least one outcome is required".into()));
    }
    if n == 0 {
        return Err(Error::Dimension("at least one subject is required".into()));
    }
    let lt = usize::from(config.latent_time);
    let free = p - lt;
    let k = free + p;
    let sizes = [
        p * d,
        lt * p,
        p,
        lt,
        free,
        p,
        lt * n,
        n * free,
        n * p,
        match config.random_effects {
            RandomEffects::Univariate => 0,
            RandomEffects::Multivariate => k * (k - 1) / 2,
        },
    ];
    let mut start = 0;
    let ranges = sizes.map(|len| {
        let r = start..start + len;
        start += len;
        r
    });
    Ok(ParameterLayout {
        n,
        p,
        d,
        random_effects: config.random_effects,
        latent_time: config.latent_time,
        parameterization: config.parameterization,
        intercept_columns: vec![None; p],
        ranges,
        total_dim: start,
    })
}

impl ParameterLayout {
    pub fn range(&self, block: Block) -> Range<usize> {
        self.ranges[block as usize].clone()
    }

    /// Number of free random intercepts per subject: `p - 1` under the
    /// sum-to-zero constraint, `p` without a latent time.
    pub fn free_intercepts(&self) -> usize {
        if self.latent_time {
            self.p - 1
        } else {
            self.p
        }
    }

    /// Dimension of the joint random-effect vector (free intercepts then slopes).
    pub fn effect_dim(&self) -> usize {
        self.free_intercepts() + self.p
    }

    /// The intercept coefficient of `outcome` within `beta`, or 0.
    pub fn level_offset(&self, beta: &[f64], outcome: usize) -> f64 {
        self.intercept_columns[outcome].map_or(0.0, |j| beta[outcome * self.d + j])
    }

    pub fn block_of(&self, index: usize) -> Option<Block> {
        Block::ALL
            .into_iter()
            .find(|&b| self.ranges[b as usize].contains(&index))
    }

    /// Parameter names in layout order, one-based indices.
    pub fn names(&self) -> Vec<String> {
        let (n, p, d) = (self.n, self.p, self.d);
        let mut names = Vec::with_capacity(self.total_dim);
        for k in 0..p {
            for j in 0..d {
                names.push(format!("beta[{},{}]", k + 1, j + 1));
            }
        }
        let free = self.free_intercepts();
        if self.latent_time {
            names.extend((0..p).map(|k| format!("gamma[{}]", k + 1)));
        }
        names.extend((0..p).map(|k| format!("sigma[{}]", k + 1)));
        if self.latent_time {
            names.push("sigma_delta".to_string());
        }
        names.extend((0..free).map(|k| format!("sigma_alpha0[{}]", k + 1)));
        names.extend((0..p).map(|k| format!("sigma_alpha1[{}]", k + 1)));
        if self.latent_time {
            names.extend((0..n).map(|i| format!("delta[{}]", i + 1)));
        }
        for i in 0..n {
            for k in 0..free {
                names.push(format!("alpha0[{},{}]", i + 1, k + 1));
            }
        }
        for i in 0..n {
            for k in 0..p {
                names.push(format!("alpha1[{},{}]", i + 1, k + 1));
            }
        }
        if self.random_effects == RandomEffects::Multivariate {
            let kdim = self.effect_dim();
            for a in 1..kdim {
                for b in 0..a {
                    names.push(format!("corr[{},{}]", a + 1, b + 1));
                }
            }
        }
        names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n == name)
    }
}

/// Model parameters in constrained space.
///
/// Matrices are stored row-major: `beta` is `p x d`, `alpha0_free` is
/// `n x (p-1)` (`n x p` without a latent time), `alpha1` is `n x p`.
/// Without a latent time `gamma` and `delta` are empty and `sigma_delta` is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub p: usize,
    pub d: usize,
    pub latent_time: bool,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_delta: f64,
    pub sigma_alpha0: Vec<f64>,
    pub sigma_alpha1: Vec<f64>,
    /// Cholesky factor of the random-effect correlation matrix (M2 only).
    pub corr_chol: Option<DMatrix<f64>>,
    pub delta: Vec<f64>,
    pub alpha0_free: Vec<f64>,
    pub alpha1: Vec<f64>,
}

impl ParameterSet {
    pub fn n(&self) -> usize {
        self.alpha1.len() / self.p
    }

    pub fn free_intercepts(&self) -> usize {
        if self.latent_time {
            self.p - 1
        } else {
            self.p
        }
    }

    /// Latent-time slope of `outcome`, zero without a latent time.
    pub fn gamma(&self, outcome: usize) -> f64 {
        self.gamma.get(outcome).copied().unwrap_or(0.0)
    }

    /// Time shift of `subject`, zero without a latent time.
    pub fn delta(&self, subject: usize) -> f64 {
        self.delta.get(subject).copied().unwrap_or(0.0)
    }

    pub fn beta_row(&self, outcome: usize) -> &[f64] {
        &self.beta[outcome * self.d..(outcome + 1) * self.d]
    }

    /// Full random intercept, completing the free ones to sum to zero.
    pub fn alpha0(&self, subject: usize, outcome: usize) -> f64 {
        let m = self.free_intercepts();
        let row = &self.alpha0_free[subject * m..(subject + 1) * m];
        if outcome < m {
            row[outcome]
        } else {
            -row.iter().sum::<f64>()
        }
    }

    pub fn alpha1(&self, subject: usize, outcome: usize) -> f64 {
        self.alpha1[subject * self.p + outcome]
    }

    pub fn correlation(&self) -> Option<DMatrix<f64>> {
        self.corr_chol.as_ref().map(|l| l * l.transpose())
    }

    /// Flattens into the constrained draw vector. The correlation block holds
    /// the strict lower triangle of the correlation matrix, row by row.
    pub fn to_constrained(&self, layout: &ParameterLayout) -> Vec<f64> {
        let mut out = Vec::with_capacity(layout.total_dim);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.sigma);
        if layout.latent_time {
            out.push(self.sigma_delta);
        }
        out.extend_from_slice(&self.sigma_alpha0);
        out.extend_from_slice(&self.sigma_alpha1);
        out.extend_from_slice(&self.delta);
        out.extend_from_slice(&self.alpha0_free);
        out.extend_from_slice(&self.alpha1);
        if layout.random_effects == RandomEffects::Multivariate {
            let omega = self
                .correlation()
                .unwrap_or_else(|| DMatrix::identity(layout.effect_dim(), layout.effect_dim()));
            for a in 1..omega.nrows() {
                for b in 0..a {
                    out.push(omega[(a, b)]);
                }
            }
        }
        debug_assert_eq!(out.len(), layout.total_dim);
        out
    }

    /// Inverse of [`ParameterSet::to_constrained`]. The correlation factor is
    /// recovered by Cholesky decomposition; a matrix that is not positive
    /// definite yields `corr_chol = None`.
    pub fn from_constrained(values: &[f64], layout: &ParameterLayout) -> Self {
        let take = |b: Block| values[layout.range(b)].to_vec();
        let corr_chol = match layout.random_effects {
            RandomEffects::Univariate => None,
            RandomEffects::Multivariate => {
                let kdim = layout.effect_dim();
                let mut omega = DMatrix::identity(kdim, kdim);
                let mut it = values[layout.range(Block::Corr)].iter();
                for a in 1..kdim {
                    for b in 0..a {
                        let v = *it.next().expect("corr block length");
                        omega[(a, b)] = v;
                        omega[(b, a)] = v;
                    }
                }
                omega.cholesky().map(|c| c.l())
            }
        };
        Self {
            p: layout.p,
            d: layout.d,
            latent_time: layout.latent_time,
            beta: take(Block::Beta),
            gamma: take(Block::Gamma),
            sigma: take(Block::Sigma),
            sigma_delta: values[layout.range(Block::SigmaDelta)].first().copied().unwrap_or(0.0),
            sigma_alpha0: take(Block::SigmaAlpha0),
            sigma_alpha1: take(Block::SigmaAlpha1),
            corr_chol,
            delta: take(Block::Delta),
            alpha0_free: take(Block::Alpha0),
            alpha1: take(Block::Alpha1),
        }
    }
}

/// A failed identifiability or structural precondition.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Violation {
    EmptyDataset,
    SubjectWithoutObservations(String),
    NonFiniteValue { subject: String, outcome: String },
    TimeCollinearWithIntercept,
    RankDeficientDesign { dependent: Vec<String> },
    TimeInCovariateSpan,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyDataset => f.write_str("dataset has no observations"),
            Violation::SubjectWithoutObservations(s) => {
                write!(f, "subject {s} has no observations")
            }
            Violation::NonFiniteValue { subject, outcome } => {
                write!(f, "non-finite time, value or covariate for subject {subject}, outcome {outcome}")
            }
            Violation::TimeCollinearWithIntercept => {
                f.write_str("time column collinear with intercept")
            }
            Violation::RankDeficientDesign { dependent } => write!(
                f,
                "rank deficient design (linearly dependent columns: {})",
                dependent.join(", ")
            ),
            Violation::TimeInCovariateSpan => {
                f.write_str("rank deficient design (time column in the span of the covariates)")
            }
        }
    }
}

/// Outcome of [`validate_dataset`]; empty means every precondition holds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks that the stacked design `[x | t]` has full column rank and that
/// `t` is not collinear with the constant column.
pub fn validate_dataset(dataset: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    if dataset.is_empty() {
        violations.push(Violation::EmptyDataset);
        return ValidationReport { violations };
    }

    let mut seen = vec![false; dataset.n_subjects()];
    for obs in &dataset.observations {
        seen[obs.subject] = true;
        if !obs.time.is_finite()
            || !obs.value.is_finite()
            || obs.covariates.iter().any(|c| !c.is_finite())
        {
            violations.push(Violation::NonFiniteValue {
                subject: dataset.subject_names[obs.subject].clone(),
                outcome: dataset.outcome_names[obs.outcome].clone(),
            });
        }
    }
    for (i, present) in seen.into_iter().enumerate() {
        if !present {
            violations.push(Violation::SubjectWithoutObservations(
                dataset.subject_names[i].clone(),
            ));
        }
    }
    if violations
        .iter()
        .any(|v| matches!(v, Violation::NonFiniteValue { .. }))
    {
        violations.sort();
        violations.dedup();
        return ValidationReport { violations };
    }

    let rows = dataset.len();
    let d = dataset.n_covariates();

    let time_vs_one = DMatrix::from_fn(rows, 2, |r, c| {
        if c == 0 {
            1.0
        } else {
            dataset.observations[r].time
        }
    });
    let time_collinear = linalg::pivoted_rank(&time_vs_one, RANK_TOLERANCE).rank < 2;
    if time_collinear {
        violations.push(Violation::TimeCollinearWithIntercept);
    }

    if d > 0 {
        let x = DMatrix::from_fn(rows, d, |r, c| dataset.observations[r].covariates[c]);
        let rx = linalg::pivoted_rank(&x, RANK_TOLERANCE);
        if rx.rank < d {
            let mut dependent: Vec<String> = rx.pivots[rx.rank..]
                .iter()
                .map(|&j| dataset.covariate_names[j].clone())
                .collect();
            dependent.sort();
            violations.push(Violation::RankDeficientDesign { dependent });
        } else if !time_collinear {
            let xt = DMatrix::from_fn(rows, d + 1, |r, c| {
                let obs = &dataset.observations[r];
                if c < d {
                    obs.covariates[c]
                } else {
                    obs.time
                }
            });
            if linalg::pivoted_rank(&xt, RANK_TOLERANCE).rank < d + 1 {
                violations.push(Violation::TimeInCovariateSpan);
            }
        }
    }

    violations.sort();
    violations.dedup();
    ValidationReport { violations }
}
