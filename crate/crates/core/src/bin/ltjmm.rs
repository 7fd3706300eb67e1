use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use ltjmm::diagnostics::summarize;
use ltjmm::identifiability::check_identifiability;
use ltjmm::io::{
    self, format_f64, load_fit, persist_results, read_long_csv, read_long_csv_with, transform_dataset,
    write_csv, CriteriaRow, ResultSet, RunConfig, RunManifest, TrajectorySet, TransformScope,
};
use ltjmm::model_compare::{compare, dic, pointwise_loglik, psis_loo, waic, Criterion, CriterionResult};
use ltjmm::model_spec::{validate_dataset, Block, Parameterization};
use ltjmm::predict::{population_trajectory, subject_trajectory, PopulationProfile};
use ltjmm::simulate::{generate_dataset, run_replicates, StudyDesign, TrueParameters};
use ltjmm::{run, Error, RandomEffects, Result};

#[derive(Parser)]
#[command(name = "ltjmm", version, about = "Latent time joint mixed-effects models fitted by Hamiltonian Monte Carlo")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a long-format CSV file.
    Fit(FitArgs),
    /// Generate synthetic data and run a replicated simulation study.
    Simulate(SimulateArgs),
    /// Compare saved fits by WAIC, LOOIC and DIC.
    Compare(CompareArgs),
    /// Subject or population trajectories from a saved fit.
    Predict(PredictArgs),
    /// Weighted normal-scores transformation of outcome values.
    Transform(TransformArgs),
    /// Report dataset validation and identifiability checks.
    Check(CheckArgs),
}

#[derive(Args, Clone)]
struct SamplerArgs {
    /// Number of chains.
    #[arg(long)]
    chains: Option<usize>,
    /// Iterations per chain, warmup included.
    #[arg(long = "iter")]
    iterations: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SamplerArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.sampler;
        if let Some(v) = self.chains {
            s.chains = v;
        }
        if let Some(v) = self.iterations {
            s.iterations = v;
        }
        if let Some(v) = self.warmup {
            s.warmup = v;
        }
        if let Some(v) = self.thin {
            s.thin = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Long-format CSV with subject_id, outcome, time, value and covariates.
    #[arg(long)]
    data: PathBuf,
    /// TOML file with [model] and [sampler] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Random-effect variant (m1 or m2); overrides the config file.
    #[arg(long)]
    variant: Option<RandomEffects>,
    /// Drop the latent time (conventional mixed model baselines).
    #[arg(long)]
    no_latent_time: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML file with the generating parameters; defaults to the built-in scenario.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Number of outcomes; must match the generating parameters.
    #[arg(long)]
    p: Option<usize>,
    /// Visits per subject.
    #[arg(long, default_value_t = 4)]
    q: usize,
    /// Random-effect variant used to generate the data.
    #[arg(long, default_value = "m1")]
    variant: RandomEffects,
    /// Variants fitted to every replicate.
    #[arg(long, value_delimiter = ',', default_value = "m1,m2")]
    fit_variants: Vec<RandomEffects>,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    /// Write one generated dataset and its generating values without fitting.
    #[arg(long)]
    data_only: bool,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Output directories of `fit` runs on the same data.
    #[arg(long, num_args = 2.., required = true)]
    fits: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Output directory of a `fit` run.
    #[arg(long)]
    fit: PathBuf,
    /// Subject identifiers; repeat for several subjects.
    #[arg(long, conflicts_with = "profile")]
    subject: Vec<String>,
    /// Comma-separated covariate values for a population curve.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    profile: Option<Vec<f64>>,
    /// Grid as `start:stop:step` or a comma-separated list.
    #[arg(long, allow_hyphen_values = true)]
    grid: String,
    /// Population curves without the latent-time contribution.
    #[arg(long)]
    no_latent: bool,
    /// Covariate that advances with time (for example age).
    #[arg(long)]
    age_column: Option<String>,
    /// Added to the population grid to form the reported axis.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    axis_offset: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long)]
    data: PathBuf,
    /// Outcomes to transform; all outcomes when omitted.
    #[arg(long, value_delimiter = ',')]
    columns: Vec<String>,
    /// Column holding per-row weights.
    #[arg(long, conflicts_with = "group_column")]
    weights_column: Option<String>,
    /// Column whose groups receive equal total weight.
    #[arg(long)]
    group_column: Option<String>,
    /// Reference visits: `all` or `baseline`.
    #[arg(long, default_value = "all")]
    scope: TransformScope,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_latent_time: bool,
}

/// Exit status 1 for invalid input, 2 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_)
        | Error::Config(_)
        | Error::Dimension(_)
        | Error::UnknownSubject(_)
        | Error::MissingColumn { .. }
        | Error::Parse { .. }
        | Error::MismatchedObservations { .. } => 1,
        Error::ChainAborted { .. } | Error::Io { .. } | Error::Csv { .. } => 2,
    }
}

fn command_line() -> Vec<String> {
    std::env::args().collect()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn criteria(draws: &ltjmm::DrawsMatrix, dataset: &ltjmm::Dataset) -> [CriterionResult; 3] {
    let ll = pointwise_loglik(draws, dataset);
    [waic(&ll), psis_loo(&ll), dic(draws, dataset)]
}

fn fit(args: FitArgs) -> Result<()> {
    let start = Instant::now();
    let dataset = read_long_csv(&args.data)?;
    let mut cfg = load_config(args.config.as_deref())?;
    args.sampler.apply(&mut cfg);
    if let Some(v) = args.variant {
        cfg.model.random_effects = v;
    }
    if args.no_latent_time {
        cfg.model.latent_time = false;
    }
    let report = check_identifiability(&dataset, &cfg.model);
    if !report.all_ok() {
        return Err(Error::Validation(report.notes.join("; ")));
    }
    let draws = run(&cfg.model, &dataset, &cfg.sampler)?;
    let summaries = summarize(&draws);
    let [w, l, d] = criteria(&draws, &dataset);
    let label = cfg.model.label();
    let rows = vec![CriteriaRow {
        model: label.clone(),
        waic: w.value,
        looic: l.value,
        dic: d.value,
    }];

    let mut manifest = RunManifest::new(command_line(), cfg.sampler.seed).with_data(&args.data, &dataset)?;
    manifest.model = Some(cfg.model.clone());
    manifest.sampler = Some(cfg.sampler.clone());
    manifest.elapsed_seconds = start.elapsed().as_secs_f64();
    let divergences = draws.divergences();
    if divergences > 0 {
        manifest.notes.push(format!("{divergences} divergent transitions"));
    }
    let results = ResultSet {
        draws: Some(&draws),
        dataset: Some(&dataset),
        summaries: &summaries,
        criteria: &rows,
        trajectories: &[],
    };
    persist_results(&args.out, &results, manifest)?;

    println!("model {label}: {} draws from {} chains, {divergences} divergences", draws.n_draws(), draws.n_chains());
    println!("{:<20} {:>12} {:>12} {:>12} {:>8} {:>8}", "parameter", "mean", "2.5%", "97.5%", "R-hat", "ESS");
    for (j, row) in summaries.iter().enumerate() {
        if draws.layout.block_of(j).is_some_and(Block::is_population) {
            println!(
                "{:<20} {:>12.4} {:>12.4} {:>12.4} {:>8.3} {:>8.0}",
                row.name, row.mean, row.lower, row.upper, row.rhat, row.ess
            );
        }
    }
    let worst = summaries.iter().map(|r| r.rhat).fold(f64::NEG_INFINITY, f64::max);
    println!("max R-hat {worst:.3}");
    println!("WAIC {:.2}  LOOIC {:.2}  DIC {:.2}", w.value, l.value, d.value);
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let truth = match &args.truth {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str::<TrueParameters>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrueParameters::default(),
    };
    let p = args.p.unwrap_or(truth.p());
    truth.check(p)?;
    let mut cfg = RunConfig::default();
    args.sampler.apply(&mut cfg);
    let seed = cfg.sampler.seed;
    let design = StudyDesign {
        replicates: args.replicates,
        n: args.n,
        q: args.q,
        seed,
    };
    let mut manifest = RunManifest::new(command_line(), seed);
    manifest.truth = Some(truth.clone());
    manifest.design = Some(design.clone());
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;

    if args.data_only {
        let (dataset, params) = generate_dataset(&truth, args.n, p, args.q, args.variant, seed)?;
        let config = ltjmm::ModelConfig::with_random_effects(args.variant);
        let lay = ltjmm::layout(&config, args.n, p, truth.d())?;
        let values = params.to_constrained(&lay);
        write_csv(
            &args.out.join("truth.csv"),
            &["parameter", "value"],
            lay.names().into_iter().zip(values).map(|(n, v)| vec![n, format_f64(v)]),
        )?;
        manifest.elapsed_seconds = start.elapsed().as_secs_f64();
        manifest.notes.push("truth.csv holds the generating values".into());
        let results = ResultSet {
            dataset: Some(&dataset),
            ..ResultSet::default()
        };
        persist_results(&args.out, &results, manifest)?;
        println!("wrote {} observations for {} subjects", dataset.len(), dataset.n_subjects());
        return Ok(());
    }

    manifest.sampler = Some(cfg.sampler.clone());
    let metrics = run_replicates(&design, &truth, args.variant, &args.fit_variants, &cfg.sampler)?;
    write_csv(
        &args.out.join("metrics.csv"),
        &["model", "parameter", "truth", "bias", "mspe", "c95", "replicates"],
        metrics.per_variant.iter().flat_map(|v| {
            v.metrics.iter().map(move |m| {
                vec![
                    v.variant.label().to_string(),
                    m.name.clone(),
                    format_f64(m.truth),
                    format_f64(m.bias),
                    format_f64(m.mspe),
                    format_f64(m.c95),
                    m.replicates.to_string(),
                ]
            })
        }),
    )?;
    write_csv(
        &args.out.join("fits.csv"),
        &["replicate", "model", "WAIC", "LOOIC", "DIC", "max_rhat", "divergences"],
        metrics.records.iter().map(|r| {
            vec![
                r.replicate.to_string(),
                r.variant.label().to_string(),
                format_f64(r.waic.value),
                format_f64(r.looic.value),
                format_f64(r.dic.value),
                format_f64(r.max_rhat),
                r.divergences.to_string(),
            ]
        }),
    )?;
    if !metrics.comparisons.is_empty() {
        write_csv(
            &args.out.join("selection.csv"),
            &["criterion", "model", "win_frequency"],
            metrics.comparisons.iter().flat_map(|c| {
                c.models
                    .iter()
                    .zip(&c.win_frequency)
                    .map(move |(m, f)| vec![c.criterion.to_string(), m.clone(), format_f64(*f)])
            }),
        )?;
        write_csv(
            &args.out.join("differences.csv"),
            &["criterion", "first", "second", "q25", "median", "q75"],
            metrics.comparisons.iter().flat_map(|c| {
                c.differences.iter().map(move |d| {
                    vec![
                        c.criterion.to_string(),
                        d.first.clone(),
                        d.second.clone(),
                        format_f64(d.quartiles[0]),
                        format_f64(d.quartiles[1]),
                        format_f64(d.quartiles[2]),
                    ]
                })
            }),
        )?;
    }
    for entry in &metrics.audit {
        manifest.notes.push(format!(
            "replicate {} ({}) excluded: {}",
            entry.replicate,
            entry.variant.label(),
            entry.reason
        ));
    }
    manifest.elapsed_seconds = start.elapsed().as_secs_f64();
    persist_results(&args.out, &ResultSet::default(), manifest)?;

    for v in &metrics.per_variant {
        println!("fitted {}:", v.variant.label());
        for m in &v.metrics {
            println!(
                "  {:<18} truth {:>8.3} bias {:>8.4} MSPE {:>8.4} C95 {:>5.2}",
                m.name, m.truth, m.bias, m.mspe, m.c95
            );
        }
    }
    for c in &metrics.comparisons {
        let freq: Vec<String> = c
            .models
            .iter()
            .zip(&c.win_frequency)
            .map(|(m, f)| format!("{m} {:.0}%", 100.0 * f))
            .collect();
        println!("{} best: {}", c.criterion, freq.join(", "));
    }
    if !metrics.audit.is_empty() {
        println!("{} fits excluded (see manifest notes)", metrics.audit.len());
    }
    Ok(())
}

fn compare_fits(args: CompareArgs) -> Result<()> {
    let start = Instant::now();
    let mut names = Vec::new();
    let mut results: Vec<[CriterionResult; 3]> = Vec::new();
    for dir in &args.fits {
        let saved = load_fit(dir)?;
        names.push(saved.draws.config.label());
        results.push(criteria(&saved.draws, &saved.dataset));
    }
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    if unique.len() != names.len() {
        names = args.fits.iter().map(|p| p.display().to_string()).collect();
    }
    let rows: Vec<CriteriaRow> = names
        .iter()
        .zip(&results)
        .map(|(m, [w, l, d])| CriteriaRow {
            model: m.clone(),
            waic: w.value,
            looic: l.value,
            dic: d.value,
        })
        .collect();
    let mut diffs = Vec::new();
    for (c, criterion) in [Criterion::Waic, Criterion::Looic, Criterion::Dic].into_iter().enumerate() {
        let per_model: Vec<Vec<CriterionResult>> = results.iter().map(|r| vec![r[c].clone()]).collect();
        let table = compare(&names, &per_model)?;
        println!("{criterion} best: {}", names[table.winners[0]]);
        for d in table.differences {
            diffs.push(vec![criterion.to_string(), d.first, d.second, format_f64(d.differences[0])]);
        }
    }
    let mut manifest = RunManifest::new(command_line(), 0);
    manifest.notes.extend(args.fits.iter().map(|p| format!("fit: {}", p.display())));
    manifest.elapsed_seconds = start.elapsed().as_secs_f64();
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    write_csv(&args.out.join("differences.csv"), &["criterion", "first", "second", "difference"], diffs)?;
    persist_results(
        &args.out,
        &ResultSet {
            criteria: &rows,
            ..ResultSet::default()
        },
        manifest,
    )?;
    println!("{:<24} {:>12} {:>12} {:>12}", "Model", "WAIC", "LOOIC", "DIC");
    for r in &rows {
        println!("{:<24} {:>12.2} {:>12.2} {:>12.2}", r.model, r.waic, r.looic, r.dic);
    }
    Ok(())
}

/// Parses `start:stop:step` (inclusive of `stop` up to rounding) or a
/// comma-separated list.
fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse grid `{text}`"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (start, stop, step) = (v[0], v[1], v[2]);
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        return Ok((0..count).map(|i| start + i as f64 * step).collect());
    }
    text.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect()
}

fn predict(args: PredictArgs) -> Result<()> {
    let start = Instant::now();
    let saved = load_fit(&args.fit)?;
    let grid = parse_grid(&args.grid)?;
    let age_column = args
        .age_column
        .as_ref()
        .map(|name| {
            saved
                .dataset
                .covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("unknown covariate `{name}`")))
        })
        .transpose()?;
    let mut sets = Vec::new();
    if let Some(values) = args.profile {
        let profile = PopulationProfile {
            covariates: values,
            sweep_column: age_column,
            axis_offset: args.axis_offset,
        };
        let include = !args.no_latent;
        let grids = population_trajectory(&saved.draws, &saved.dataset.outcome_names, &profile, &grid, include)?;
        let label = if include { "population" } else { "population_no_latent" };
        sets.push(TrajectorySet {
            label: label.into(),
            grids,
        });
    } else if !args.subject.is_empty() {
        for id in &args.subject {
            let grids = subject_trajectory(&saved.draws, &saved.dataset, id, &grid, age_column)?;
            sets.push(TrajectorySet {
                label: format!("subject_{id}"),
                grids,
            });
        }
    } else {
        return Err(Error::Config("either --subject or --profile is required".into()));
    }
    let mut manifest = RunManifest::new(command_line(), saved.manifest.seed);
    manifest.notes.push(format!("fit: {}", args.fit.display()));
    manifest.model = saved.manifest.model.clone();
    manifest.elapsed_seconds = start.elapsed().as_secs_f64();
    let written = persist_results(
        &args.out,
        &ResultSet {
            trajectories: &sets,
            ..ResultSet::default()
        },
        manifest,
    )?;
    for f in &written.files {
        println!("wrote {}", args.out.join(&f.path).display());
    }
    Ok(())
}

fn transform(args: TransformArgs) -> Result<()> {
    let start = Instant::now();
    let mut extra: Vec<&str> = Vec::new();
    if let Some(c) = &args.weights_column {
        extra.push(c);
    }
    if let Some(c) = &args.group_column {
        extra.push(c);
    }
    let table = read_long_csv_with(&args.data, &extra)?;
    for w in &table.warnings {
        log::warn!("{w}");
    }
    let ds = &table.dataset;
    let weights: Vec<f64> = if args.weights_column.is_some() {
        table.extra[0]
            .iter()
            .enumerate()
            .map(|(r, t)| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    path: args.data.clone(),
                    line: r + 2,
                    message: format!("cannot parse weight `{t}`"),
                })
            })
            .collect::<Result<_>>()?
    } else if args.group_column.is_some() {
        io::inverse_group_frequency_weights(&table.extra[0])
    } else {
        vec![1.0; ds.len()]
    };
    let outcomes: Vec<usize> = if args.columns.is_empty() {
        (0..ds.n_outcomes()).collect()
    } else {
        args.columns
            .iter()
            .map(|c| {
                ds.outcome_names
                    .iter()
                    .position(|o| o == c)
                    .ok_or_else(|| Error::Config(format!("unknown outcome `{c}`")))
            })
            .collect::<Result<_>>()?
    };
    let out = transform_dataset(ds, &outcomes, &weights, args.scope)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let columns: Vec<(&str, Vec<String>)> = extra.iter().copied().zip(table.extra.iter().cloned()).collect();
    io::write_dataset_with(&out, args.out.join(io::DATA_FILE), &columns)?;
    let mut manifest = RunManifest::new(command_line(), 0).with_data(&args.data, ds)?;
    manifest.notes.push(format!("reference visits: {:?}", args.scope));
    manifest.elapsed_seconds = start.elapsed().as_secs_f64();
    let data_path = args.out.join(io::DATA_FILE);
    manifest.files.push(io::ManifestFile {
        path: io::DATA_FILE.into(),
        sha256: io::sha256_file(&data_path)?,
    });
    persist_results(&args.out, &ResultSet::default(), manifest)?;
    println!("transformed {} outcomes over {} rows", outcomes.len(), out.len());
    Ok(())
}

fn check(args: CheckArgs) -> Result<bool> {
    let dataset = read_long_csv(&args.data)?;
    let mut cfg = load_config(args.config.as_deref())?;
    if args.no_latent_time {
        cfg.model.latent_time = false;
    }
    cfg.model.validate(dataset.n_outcomes(), dataset.n_covariates())?;
    let validation = validate_dataset(&dataset);
    let report = check_identifiability(&dataset, &cfg.model);
    println!(
        "subjects {}  outcomes {}  covariates {}  rows {}",
        dataset.n_subjects(),
        dataset.n_outcomes(),
        dataset.n_covariates(),
        dataset.len()
    );
    println!("validation: {validation}");
    println!("design rank ok: {}", report.design_rank_ok);
    println!("time independent of intercept: {}", report.time_independent_of_intercept);
    println!(
        "intercept system unique: {} ({} unknowns, {} equations, max discrepancy {:e})",
        report.constraint_system_unique, report.unknowns, report.equations, report.max_discrepancy
    );
    for note in &report.notes {
        println!("note: {note}");
    }
    if cfg.model.parameterization == Parameterization::Hierarchical {
        let columns = ltjmm::posterior::intercept_columns(&dataset, &cfg.model);
        if columns.iter().all(Option::is_none) {
            println!("note: no all-ones covariate; outcome levels are centered at zero");
        }
    }
    Ok(validation.is_valid() && report.all_ok())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(a) => fit(a).map(|_| true),
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Compare(a) => compare_fits(a).map(|_| true),
        Command::Predict(a) => predict(a).map(|_| true),
        Command::Transform(a) => transform(a).map(|_| true),
        Command::Check(a) => check(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_grid("-1, 0, 2").unwrap(), vec![-1.0, 0.0, 2.0]);
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("a,b").is_err());
    }

    #[test]
    fn validation_errors_exit_with_one() {
        assert_eq!(exit_code(&Error::Validation("x".into())), 1);
        assert_eq!(
            exit_code(&Error::ChainAborted {
                chain: 0,
                reason: "x".into()
            }),
            2
        );
    }
}
