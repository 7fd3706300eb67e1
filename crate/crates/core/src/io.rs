//! Data ingestion, the weighted normal-scores outcome transformation, run
//! configuration files and persistence of fit results.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::hash::Hash;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diagnostics::SummaryRow;
use crate::error::{Error, Result};
use crate::model_spec::{layout, Dataset, ModelConfig, Observation};
use crate::predict::TrajectoryGrid;
use crate::sampler::{ChainDraws, DrawsMatrix, SamplerSettings, TransitionStats};
use crate::simulate::{StudyDesign, TrueParameters};

pub const SUBJECT_COLUMN: &str = "subject_id";
pub const OUTCOME_COLUMN: &str = "outcome";
pub const TIME_COLUMN: &str = "time";
pub const VALUE_COLUMN: &str = "value";
const REQUIRED: [&str; 4] = [SUBJECT_COLUMN, OUTCOME_COLUMN, TIME_COLUMN, VALUE_COLUMN];

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DATA_FILE: &str = "data.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CRITERIA_FILE: &str = "criteria.csv";

const STAT_COLUMNS: [&str; 7] = [
    "accept_stat__",
    "tree_depth__",
    "n_leapfrog__",
    "divergent__",
    "energy__",
    "step_size__",
    "log_density__",
];

/// Formats a number with 17 significant digits, which round-trips every
/// finite `f64` exactly.
pub fn format_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A long-format table parsed into a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct LongCsv {
    pub dataset: Dataset,
    /// Raw text of the columns requested as `extra`, one vector per column,
    /// aligned with `dataset.observations`.
    pub extra: Vec<Vec<String>>,
    pub warnings: Vec<String>,
}

/// Reads a long-format CSV with columns `subject_id`, `outcome`, `time`,
/// `value` and any number of covariate columns. Duplicate
/// (subject, outcome, time) rows are logged as warnings.
pub fn read_long_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let table = read_long_csv_with(path, &[])?;
    for w in &table.warnings {
        log::warn!("{w}");
    }
    Ok(table.dataset)
}

/// Like [`read_long_csv`], keeping the listed columns out of the covariates
/// and returning their raw values.
pub fn read_long_csv_with(path: impl AsRef<Path>, extra_columns: &[&str]) -> Result<LongCsv> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: "empty file".into(),
        });
    }
    let position = |name: &str| headers.iter().position(|h| h == name);
    let mut required = [0usize; 4];
    for (slot, name) in required.iter_mut().zip(REQUIRED) {
        *slot = position(name).ok_or_else(|| Error::MissingColumn {
            path: path.into(),
            column: name.into(),
        })?;
    }
    let mut extra_index = Vec::with_capacity(extra_columns.len());
    for name in extra_columns {
        extra_index.push(position(name).ok_or_else(|| Error::MissingColumn {
            path: path.into(),
            column: name.to_string(),
        })?);
    }
    let covariate_index: Vec<usize> = (0..headers.len())
        .filter(|j| !required.contains(j) && !extra_index.contains(j))
        .collect();
    let covariate_names: Vec<String> = covariate_index.iter().map(|&j| headers[j].to_string()).collect();

    let mut subjects: Vec<String> = Vec::new();
    let mut subject_map: HashMap<String, usize> = HashMap::new();
    let mut outcomes: Vec<String> = Vec::new();
    let mut outcome_map: HashMap<String, usize> = HashMap::new();
    let mut observations = Vec::new();
    let mut extra = vec![Vec::new(); extra_columns.len()];
    let mut seen: HashMap<(usize, usize, u64), usize> = HashMap::new();
    let mut warnings = Vec::new();

    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let number = |j: usize, what: &str| -> Result<f64> {
            let text = record.get(j).unwrap_or("");
            text.parse::<f64>().map_err(|_| Error::Parse {
                path: path.into(),
                line,
                message: format!("cannot parse {what} `{text}` as a number"),
            })
        };
        let subject_name = record.get(required[0]).unwrap_or("").to_string();
        let outcome_name = record.get(required[1]).unwrap_or("").to_string();
        if subject_name.is_empty() || outcome_name.is_empty() {
            return Err(Error::Parse {
                path: path.into(),
                line,
                message: "empty subject or outcome identifier".into(),
            });
        }
        let time = number(required[2], TIME_COLUMN)?;
        let value = number(required[3], VALUE_COLUMN)?;
        let covariates = covariate_index
            .iter()
            .zip(&covariate_names)
            .map(|(&j, name)| number(j, &format!("covariate `{name}`")))
            .collect::<Result<Vec<f64>>>()?;
        let subject = *subject_map.entry(subject_name.clone()).or_insert_with(|| {
            subjects.push(subject_name);
            subjects.len() - 1
        });
        let outcome = *outcome_map.entry(outcome_name.clone()).or_insert_with(|| {
            outcomes.push(outcome_name);
            outcomes.len() - 1
        });
        if let Some(first) = seen.insert((subject, outcome, time.to_bits()), line) {
            warnings.push(format!(
                "{}:{line}: duplicate row for subject `{}`, outcome `{}`, time {time} (first seen on line {first})",
                path.display(),
                subjects[subject],
                outcomes[outcome]
            ));
        }
        for (column, &j) in extra.iter_mut().zip(&extra_index) {
            column.push(record.get(j).unwrap_or("").to_string());
        }
        observations.push(Observation {
            subject,
            outcome,
            time,
            covariates,
            value,
        });
    }
    if observations.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 2,
            message: "file has a header but no data rows".into(),
        });
    }
    let dataset = Dataset::new(observations, subjects, outcomes, covariate_names)?;
    Ok(LongCsv {
        dataset,
        extra,
        warnings,
    })
}

/// Writes `dataset` in the long format read by [`read_long_csv`].
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset_with(dataset, path, &[])
}

/// Writes `dataset` with additional columns, each holding one value per
/// observation.
pub fn write_dataset_with(dataset: &Dataset, path: impl AsRef<Path>, extra: &[(&str, Vec<String>)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header: Vec<&str> = REQUIRED.to_vec();
    header.extend(dataset.covariate_names.iter().map(String::as_str));
    header.extend(extra.iter().map(|(name, _)| *name));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (r, obs) in dataset.observations.iter().enumerate() {
        let mut row = vec![
            dataset.subject_names[obs.subject].clone(),
            dataset.outcome_names[obs.outcome].clone(),
            format_f64(obs.time),
            format_f64(obs.value),
        ];
        row.extend(obs.covariates.iter().map(|&x| format_f64(x)));
        row.extend(extra.iter().map(|(_, values)| values[r].clone()));
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Weighted empirical distribution with the mid-rank plotting position
/// `F(x) = (sum_{v < x} w + sum_{v = x} w / 2) / sum w`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEcdf {
    values: Vec<f64>,
    /// Total weight strictly below `values[i]`.
    below: Vec<f64>,
    /// Total weight at `values[i]`.
    at: Vec<f64>,
    total: f64,
    effective_size: f64,
}

impl WeightedEcdf {
    pub fn new(values: &[f64], weights: &[f64]) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} values but {} weights",
                values.len(),
                weights.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("values must be finite".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("weights must not all be zero".into()));
        }
        let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
        let effective_size = total * total / sum_sq;

        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut uniq: Vec<f64> = Vec::new();
        let mut at: Vec<f64> = Vec::new();
        for &i in &order {
            if uniq.last() == Some(&values[i]) {
                *at.last_mut().unwrap() += weights[i];
            } else {
                uniq.push(values[i]);
                at.push(weights[i]);
            }
        }
        let mut below = Vec::with_capacity(at.len());
        let mut acc = 0.0;
        for w in &at {
            below.push(acc);
            acc += w;
        }
        Ok(Self {
            values: uniq,
            below,
            at,
            total,
            effective_size,
        })
    }

    /// Kish effective sample size `(sum w)^2 / sum w^2`.
    pub fn effective_size(&self) -> f64 {
        self.effective_size
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let i = self.values.partition_point(|v| *v < x);
        let (below, at) = if i < self.values.len() && self.values[i] == x {
            (self.below[i], self.at[i])
        } else if i < self.values.len() {
            (self.below[i], 0.0)
        } else {
            (self.total, 0.0)
        };
        (below + 0.5 * at) / self.total
    }

    /// Standard-normal quantile of [`cdf`](Self::cdf), with the probability
    /// restricted to `[1 / (2 W), 1 - 1 / (2 W)]` for the effective size `W`.
    pub fn normal_score(&self, x: f64) -> f64 {
        let edge = (0.5 / self.effective_size).min(0.5);
        let f = self.cdf(x).clamp(edge, 1.0 - edge);
        if f == 0.5 {
            return 0.0;
        }
        Normal::standard().inverse_cdf(f)
    }
}

/// Maps `values` to normal scores through their own weighted empirical
/// distribution.
pub fn weighted_inverse_gaussian_transform(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let ecdf = WeightedEcdf::new(values, weights)?;
    Ok(values.iter().map(|&v| ecdf.normal_score(v)).collect())
}

/// Weights proportional to the inverse of each group's size, scaled so every
/// group carries total weight `N / G`.
pub fn inverse_group_frequency_weights<T: Eq + Hash>(groups: &[T]) -> Vec<f64> {
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for g in groups {
        *counts.entry(g).or_default() += 1;
    }
    let per_group = groups.len() as f64 / counts.len() as f64;
    groups.iter().map(|g| per_group / counts[g] as f64).collect()
}

/// Which visits define the reference distribution of the transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformScope {
    #[default]
    AllVisits,
    /// Each subject's earliest visit per outcome.
    Baseline,
}

impl std::str::FromStr for TransformScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "all_visits" | "all-visits" => Ok(TransformScope::AllVisits),
            "baseline" => Ok(TransformScope::Baseline),
            other => Err(Error::Config(format!("unknown transform scope `{other}`"))),
        }
    }
}

/// Replaces the values of each listed outcome by their weighted normal
/// scores. `weights` has one entry per observation.
pub fn transform_dataset(
    dataset: &Dataset,
    outcomes: &[usize],
    weights: &[f64],
    scope: TransformScope,
) -> Result<Dataset> {
    if weights.len() != dataset.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} observations",
            weights.len(),
            dataset.len()
        )));
    }
    let mut out = dataset.clone();
    for &k in outcomes {
        if k >= dataset.n_outcomes() {
            return Err(Error::Dimension(format!("outcome index {k} out of range")));
        }
        let rows: Vec<usize> = (0..dataset.len())
            .filter(|&r| dataset.observations[r].outcome == k)
            .collect();
        let reference: Vec<usize> = match scope {
            TransformScope::AllVisits => rows.clone(),
            TransformScope::Baseline => {
                let mut first: BTreeMap<usize, usize> = BTreeMap::new();
                for &r in &rows {
                    let obs = &dataset.observations[r];
                    first
                        .entry(obs.subject)
                        .and_modify(|b| {
                            if obs.time < dataset.observations[*b].time {
                                *b = r;
                            }
                        })
                        .or_insert(r);
                }
                first.into_values().collect()
            }
        };
        if reference.is_empty() {
            continue;
        }
        let values: Vec<f64> = reference.iter().map(|&r| dataset.observations[r].value).collect();
        let w: Vec<f64> = reference.iter().map(|&r| weights[r]).collect();
        let ecdf = WeightedEcdf::new(&values, &w)?;
        for &r in &rows {
            out.observations[r].value = ecdf.normal_score(dataset.observations[r].value);
        }
    }
    Ok(out)
}

/// Model and sampler settings as read from a TOML file with `[model]` and
/// `[sampler]` sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerSettings,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub software_version: String,
    /// The command line that produced the outputs.
    pub command: Vec<String>,
    pub seed: u64,
    pub elapsed_seconds: f64,
    pub data_path: Option<String>,
    pub data_sha256: Option<String>,
    pub n_subjects: Option<usize>,
    pub n_outcomes: Option<usize>,
    pub n_covariates: Option<usize>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub files: Vec<ManifestFile>,
    pub model: Option<ModelConfig>,
    pub sampler: Option<SamplerSettings>,
    pub truth: Option<TrueParameters>,
    pub design: Option<StudyDesign>,
}

impl RunManifest {
    pub fn new(command: Vec<String>, seed: u64) -> Self {
        Self {
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            seed,
            elapsed_seconds: 0.0,
            data_path: None,
            data_sha256: None,
            n_subjects: None,
            n_outcomes: None,
            n_covariates: None,
            notes: Vec::new(),
            files: Vec::new(),
            model: None,
            sampler: None,
            truth: None,
            design: None,
        }
    }

    /// Records the ingested data file and its checksum.
    pub fn with_data(mut self, path: &Path, dataset: &Dataset) -> Result<Self> {
        self.data_sha256 = Some(sha256_file(path)?);
        self.data_path = Some(path.display().to_string());
        self.n_subjects = Some(dataset.n_subjects());
        self.n_outcomes = Some(dataset.n_outcomes());
        self.n_covariates = Some(dataset.n_covariates());
        Ok(self)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

/// One row of the criteria table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaRow {
    pub model: String,
    pub waic: f64,
    pub looic: f64,
    pub dic: f64,
}

/// A labelled family of trajectories, written to `trajectory_<label>.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub label: String,
    pub grids: Vec<TrajectoryGrid>,
}

/// Outputs to persist; absent parts produce no file.
#[derive(Debug, Clone, Default)]
pub struct ResultSet<'a> {
    pub draws: Option<&'a DrawsMatrix>,
    pub dataset: Option<&'a Dataset>,
    pub summaries: &'a [SummaryRow],
    pub criteria: &'a [CriteriaRow],
    pub trajectories: &'a [TrajectorySet],
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

/// Writes a CSV file with the given header and rows.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>())
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes the draws of every chain, summaries, criteria, trajectories and
/// the data into `out_dir`, then a manifest listing each file with its
/// checksum. Returns the manifest as written.
pub fn persist_results(out_dir: impl AsRef<Path>, results: &ResultSet<'_>, mut manifest: RunManifest) -> Result<RunManifest> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written: Vec<PathBuf> = Vec::new();

    if let Some(draws) = results.draws {
        for (c, chain) in draws.chains.iter().enumerate() {
            let path = dir.join(format!("draws_chain{}.csv", c + 1));
            let with_stats = chain.stats.len() == chain.values.len() && !chain.values.is_empty();
            let mut header: Vec<&str> = draws.names.iter().map(String::as_str).collect();
            if with_stats {
                header.extend(STAT_COLUMNS);
            }
            let rows = chain.values.iter().enumerate().map(|(i, v)| {
                let mut row: Vec<String> = v.iter().map(|&x| format_f64(x)).collect();
                if with_stats {
                    let s = &chain.stats[i];
                    row.push(format_f64(s.accept_stat));
                    row.push(s.tree_depth.to_string());
                    row.push(s.n_leapfrog.to_string());
                    row.push(u8::from(s.divergent).to_string());
                    row.push(format_f64(s.energy));
                    row.push(format_f64(s.step_size));
                    row.push(format_f64(s.log_density));
                }
                row
            });
            write_csv(&path, &header, rows)?;
            written.push(path);
        }
    }

    if let Some(dataset) = results.dataset {
        let path = dir.join(DATA_FILE);
        write_dataset(dataset, &path)?;
        written.push(path);
    }

    if !results.summaries.is_empty() {
        let path = dir.join(SUMMARY_FILE);
        let header = ["Parameter", "Posterior Mean", "SD", "2.5%", "97.5%", "R-hat", "ESS"];
        let rows = results.summaries.iter().map(|r| {
            vec![
                r.name.clone(),
                format_f64(r.mean),
                format_f64(r.sd),
                format_f64(r.lower),
                format_f64(r.upper),
                format_f64(r.rhat),
                format_f64(r.ess),
            ]
        });
        write_csv(&path, &header, rows)?;
        written.push(path);
    }

    if !results.criteria.is_empty() {
        let path = dir.join(CRITERIA_FILE);
        let rows = results
            .criteria
            .iter()
            .map(|c| vec![c.model.clone(), format_f64(c.waic), format_f64(c.looic), format_f64(c.dic)]);
        write_csv(&path, &["Model", "WAIC", "LOOIC", "DIC"], rows)?;
        written.push(path);
    }

    if results.trajectories.is_empty() {
        manifest.notes.push("no trajectories were requested".into());
    }
    for set in results.trajectories {
        let path = dir.join(format!("trajectory_{}.csv", sanitize(&set.label)));
        let rows = set.grids.iter().flat_map(|g| {
            (0..g.axis.len()).map(move |j| {
                vec![
                    g.outcome_name.clone(),
                    format_f64(g.axis[j]),
                    format_f64(g.mean[j]),
                    format_f64(g.lower[j]),
                    format_f64(g.upper[j]),
                ]
            })
        });
        write_csv(&path, &["outcome", "axis", "mean", "lower", "upper"], rows)?;
        written.push(path);
    }

    for path in &written {
        manifest.files.push(ManifestFile {
            path: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            sha256: sha256_file(path)?,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads the parameter columns (and sampler statistics, when present) of a
/// draws file written by [`persist_results`].
pub fn read_draws_csv(path: impl AsRef<Path>, names: &[String]) -> Result<ChainDraws> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let index: Vec<usize> = names
        .iter()
        .map(|n| {
            headers.iter().position(|h| h == n).ok_or_else(|| Error::MissingColumn {
                path: path.into(),
                column: n.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let stat_index: Option<Vec<usize>> = STAT_COLUMNS
        .iter()
        .map(|s| headers.iter().position(|h| h == *s))
        .collect();
    let mut values = Vec::new();
    let mut stats = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse = |j: usize| -> Result<f64> {
            let text = record.get(j).unwrap_or("");
            text.parse::<f64>().map_err(|_| Error::Parse {
                path: path.into(),
                line,
                message: format!("cannot parse `{text}` in column `{}`", &headers[j]),
            })
        };
        values.push(index.iter().map(|&j| parse(j)).collect::<Result<Vec<f64>>>()?);
        if let Some(si) = &stat_index {
            stats.push(TransitionStats {
                accept_stat: parse(si[0])?,
                tree_depth: parse(si[1])? as usize,
                n_leapfrog: parse(si[2])? as usize,
                divergent: parse(si[3])? != 0.0,
                energy: parse(si[4])?,
                step_size: parse(si[5])?,
                log_density: parse(si[6])?,
            });
        }
    }
    let step_size = stats.last().map_or(f64::NAN, |s| s.step_size);
    Ok(ChainDraws {
        values,
        stats,
        step_size,
        inv_metric: Vec::new(),
    })
}

/// A fit reloaded from an output directory.
#[derive(Debug, Clone)]
pub struct SavedFit {
    pub manifest: RunManifest,
    pub dataset: Dataset,
    pub draws: DrawsMatrix,
}

/// Loads the manifest, data and draws written by a `fit` run.
pub fn load_fit(dir: impl AsRef<Path>) -> Result<SavedFit> {
    let dir = dir.as_ref();
    let manifest = RunManifest::load(dir.join(MANIFEST_FILE))?;
    let config = manifest
        .model
        .clone()
        .ok_or_else(|| Error::Config(format!("{}: manifest has no model section", dir.display())))?;
    let dataset = read_long_csv(dir.join(DATA_FILE))?;
    let mut lay = layout(&config, dataset.n_subjects(), dataset.n_outcomes(), dataset.n_covariates())?;
    lay.intercept_columns = crate::posterior::intercept_columns(&dataset, &config);
    let names = lay.names();
    let mut chains = Vec::new();
    for c in 1.. {
        let path = dir.join(format!("draws_chain{c}.csv"));
        if !path.exists() {
            break;
        }
        chains.push(read_draws_csv(&path, &names)?);
    }
    if chains.is_empty() {
        return Err(Error::Config(format!("{}: no draws files found", dir.display())));
    }
    let draws = DrawsMatrix {
        names,
        config,
        layout: lay,
        chains,
    };
    Ok(SavedFit {
        manifest,
        dataset,
        draws,
    })
}
