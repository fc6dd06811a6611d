//! Command-line interface.
//!
//! Artifacts go to `--out-dir` only; logs go to stderr. Every subcommand
//! echoes its parsed flags to `run_config.json`. Exit codes: 0 success,
//! 1 internal failure (including a failed oracle check), 2 usage or input
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use matchsens_core::data::SharpNull;
use matchsens_core::density::DensityEstimator;
use matchsens_core::matcher::{
    apply_caliper, greedy_pair_match, mahalanobis, optimal_pair_match, CaliperRule, MatchedDesign,
};
use matchsens_core::rng::SeedSpec;
use matchsens_core::scores::{PsiSpec, ScaleMode};
use matchsens_core::sensearch::pipeline::{
    analyze, invert_tests, linear_grid, DensitySource, PipelineConfig,
};
use matchsens_core::sensearch::{Alternative, BiasMode, Method, SensitivitySpec};
use matchsens_core::sim::{ModelId, Pipeline};
use serde::Serialize;
use thiserror::Error;

use crate::checks::{run_suite, SuiteConfig};
use crate::io::{self, IoError, StudyColumns};
use crate::simlab::{
    run_simulation, with_threads, write_outputs, CoverageRequest, SimulationRequest,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Core(#[from] matchsens_core::Error),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Internal(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "matchsens",
    version,
    about = "Sensitivity analysis for matched observational studies"
)]
pub struct Cli {
    /// Worker threads for parallel stages; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Optimal pair matching on Mahalanobis distance.
    Match(MatchArgs),
    /// Worst-case p-value for one sharp null.
    Analyze(AnalyzeArgs),
    /// Confidence interval by inverting two-sided tests over a grid.
    Invert(InvertArgs),
    /// Replicated simulation of a synthetic model.
    Simulate(SimulateArgs),
    /// Run the oracle cross-check suite.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Study CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Covariate columns, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "x")]
    pub covariates: Vec<String>,
    #[arg(long, default_value = "y")]
    pub outcome: String,
    /// Treatment column, 0/1 or true/false.
    #[arg(long, default_value = "z")]
    pub treatment: String,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

impl DataArgs {
    fn columns(&self) -> StudyColumns {
        StudyColumns {
            covariates: self.covariates.clone(),
            outcome: self.outcome.clone(),
            treatment: self.treatment.clone(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct MatchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Drop pairs whose covariate gap exceeds this many pooled sds.
    #[arg(long)]
    pub caliper: Option<f64>,
    /// Apply the caliper to the Mahalanobis distance instead of each covariate.
    #[arg(long, default_value_t = false)]
    pub caliper_mahalanobis: bool,
    /// Greedy nearest-neighbour matching instead of optimal.
    #[arg(long, default_value_t = false)]
    pub greedy: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Uniform,
    Adaptive,
    Quantile,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityArg {
    Parametric,
    Kernel,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlternativeArg {
    Upper,
    Lower,
    TwoSided,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Gaussian,
    Exact,
    Mc,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleArg {
    Pooled,
    PerSet,
}

#[derive(Debug, Args, Serialize)]
pub struct SpecArgs {
    /// Matched design JSON written by `match`.
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Uniform)]
    pub mode: ModeArg,
    /// Uniform bias bound.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Adaptive or quantile bias bound.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Fraction of sets bounded in quantile mode.
    #[arg(long, default_value_t = 0.8)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = DensityArg::Parametric)]
    pub density: DensityArg,
    /// External sample used for density fitting and adjustment.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Use the known outcome density of a synthetic model (ignorable, confounded, ignorable-shift, confounded-shift).
    #[arg(long)]
    pub true_model: Option<String>,
    /// Residualize outcomes on an external least-squares fit first.
    #[arg(long, default_value_t = false)]
    pub adjust: bool,
    #[arg(long, value_enum, default_value_t = AlternativeArg::Upper)]
    pub alternative: AlternativeArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Gaussian)]
    pub method: MethodArg,
    /// Monte Carlo draws.
    #[arg(long, default_value_t = 10_000)]
    pub draws: u64,
    /// Monte Carlo seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub psi_inner: f64,
    #[arg(long, default_value_t = 3.0)]
    pub psi_trim: f64,
    #[arg(long, value_enum, default_value_t = ScaleArg::Pooled)]
    pub scale: ScaleArg,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Hypothesized constant effect `c` of the sharp null.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub null_effect: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct InvertArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = -1.0)]
    pub grid_start: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 1.0)]
    pub grid_stop: f64,
    #[arg(long, default_value_t = 0.02)]
    pub grid_step: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Synthetic model: ignorable, confounded, ignorable-shift or confounded-shift.
    #[arg(long)]
    pub model: String,
    /// Pipelines, comma separated; defaults to the standard set.
    #[arg(long, value_delimiter = ',')]
    pub pipeline: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub reps: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Study sample size.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub external_n: usize,
    /// Use the 0.25-sd caliper.
    #[arg(long, default_value_t = false)]
    pub caliper: bool,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    pub null_effect: f64,
    /// Also run the inversion study with this pipeline.
    #[arg(long)]
    pub coverage: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    pub grid_start: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 2.0)]
    pub grid_stop: f64,
    #[arg(long, default_value_t = 0.02)]
    pub grid_step: f64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 20_240_601)]
    pub seed: u64,
    /// Scale every instance count by this factor (1 = full suite).
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Serialize)]
struct MatchReport {
    treated: usize,
    controls: usize,
    pairs: usize,
    dropped_by_caliper: usize,
    total_distance: f64,
    source_fingerprint: String,
}

fn cmd_match(args: &MatchArgs) -> Result<(), CliError> {
    let data = io::read_study_csv(&args.data.input, &args.data.columns())?;
    let distances = mahalanobis(&data)?;
    let matched = if args.greedy {
        greedy_pair_match(&data, &distances)?
    } else {
        optimal_pair_match(&data, &distances)?
    };
    let design = match args.caliper {
        Some(w) => apply_caliper(
            &matched,
            &data,
            &CaliperRule::new(w, !args.caliper_mahalanobis)?,
        )?,
        None => matched.clone(),
    };
    let report = MatchReport {
        treated: data.treated_indices().len(),
        controls: data.control_indices().len(),
        pairs: design.len(),
        dropped_by_caliper: matched.len() - design.len(),
        total_distance: matchsens_core::matcher::design_cost(&design, &distances),
        source_fingerprint: design.source_fingerprint.clone(),
    };
    io::ensure_dir(&args.data.out_dir)?;
    io::write_json(&args.data.out_dir.join("design.json"), &design)?;
    io::write_json(&args.data.out_dir.join("match_report.json"), &report)?;
    eprintln!(
        "matched {} pairs ({} dropped by caliper)",
        report.pairs, report.dropped_by_caliper
    );
    Ok(())
}

fn pipeline_config(spec: &SpecArgs) -> Result<(PipelineConfig, Option<PathBuf>), CliError> {
    let method = match spec.method {
        MethodArg::Gaussian => Method::Gaussian,
        MethodArg::Exact => Method::Exact,
        MethodArg::Mc => Method::MonteCarlo {
            draws: spec.draws,
            seed: SeedSpec::new(spec.seed, 0),
        },
    };
    let alternative = match spec.alternative {
        AlternativeArg::Upper => Alternative::Upper,
        AlternativeArg::Lower => Alternative::Lower,
        AlternativeArg::TwoSided => Alternative::TwoSided,
    };
    let mode = match spec.mode {
        ModeArg::Uniform => BiasMode::Uniform { gamma: spec.gamma },
        ModeArg::Adaptive => BiasMode::Adaptive {
            lambda: spec.lambda,
        },
        ModeArg::Quantile => BiasMode::Quantile {
            level: spec.level,
            lambda: spec.lambda,
        },
    };
    let mut config = PipelineConfig::new(
        SensitivitySpec::new(mode, alternative, method).map_err(|e| usage(e.to_string()))?,
    );
    config.psi = PsiSpec::new(spec.psi_inner, spec.psi_trim)?;
    config.scale = match spec.scale {
        ScaleArg::Pooled => ScaleMode::Pooled,
        ScaleArg::PerSet => ScaleMode::PerSet,
    };
    config.adjust = spec.adjust;
    if matches!(spec.mode, ModeArg::Adaptive) {
        config.density = match (&spec.true_model, &spec.external) {
            (Some(name), _) => DensitySource::Known {
                model: name.parse::<ModelId>()?.truth().density,
            },
            (None, Some(_)) => DensitySource::External {
                estimator: match spec.density {
                    DensityArg::Parametric => DensityEstimator::Parametric,
                    DensityArg::Kernel => DensityEstimator::Kernel { bandwidths: None },
                },
            },
            (None, None) => return Err(usage("--mode adaptive needs --external or --true-model")),
        };
    }
    if spec.adjust && spec.external.is_none() {
        return Err(usage("--adjust needs --external"));
    }
    Ok((config, spec.external.clone()))
}

fn load_inputs(
    data: &DataArgs,
    spec: &SpecArgs,
) -> Result<
    (
        matchsens_core::data::StudyData,
        MatchedDesign,
        Option<matchsens_core::data::StudyData>,
        PipelineConfig,
    ),
    CliError,
> {
    let (config, external) = pipeline_config(spec)?;
    let study = io::read_study_csv(&data.input, &data.columns())?;
    let design: MatchedDesign = io::read_json(&spec.design)?;
    let external = external
        .map(|p| io::read_study_csv(&p, &data.columns()))
        .transpose()?;
    Ok((study, design, external, config))
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let (study, design, external, config) = load_inputs(&args.data, &args.spec)?;
    let null = SharpNull::new(args.null_effect).map_err(|e| usage(e.to_string()))?;
    let report = analyze(&study, &design, external.as_ref(), &config, null)?;
    io::ensure_dir(&args.data.out_dir)?;
    io::write_json(&args.data.out_dir.join("report.json"), &report)?;
    let mut text = format!(
        "mode {} bound {} statistic {} p-value {}\n",
        report.mode, report.bias_bound, report.statistic, report.p_value
    );
    for s in &report.sides {
        text.push_str(&format!(
            "  {:?}: mean {} variance {} p {}\n",
            s.direction, s.mean, s.variance, s.p_value
        ));
    }
    io::write_text(&args.data.out_dir.join("summary.txt"), &text)?;
    eprint!("{text}");
    Ok(())
}

fn cmd_invert(args: &InvertArgs) -> Result<(), CliError> {
    if !(args.grid_step > 0.0) || args.grid_stop < args.grid_start {
        return Err(usage(
            "grid needs --grid-step > 0 and --grid-stop >= --grid-start",
        ));
    }
    let (study, design, external, config) = load_inputs(&args.data, &args.spec)?;
    let grid = linear_grid(args.grid_start, args.grid_stop, args.grid_step);
    let ci = invert_tests(
        &study,
        &design,
        external.as_ref(),
        &config,
        args.alpha,
        &grid,
    )
    .map_err(|e| match e {
        matchsens_core::Error::InvalidInput(m) => usage(m),
        other => other.into(),
    })?;
    io::ensure_dir(&args.data.out_dir)?;
    io::write_json(&args.data.out_dir.join("interval.json"), &ci)?;
    match (ci.lower, ci.upper) {
        (Some(lo), Some(hi)) => eprintln!("{:.0}% interval [{lo}, {hi}]", 100.0 * ci.level),
        _ => eprintln!("empty interval: every grid point rejected"),
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, threads: Option<usize>) -> Result<(), CliError> {
    let model: ModelId = args.model.parse()?;
    let pipelines = if args.pipeline.is_empty() {
        Pipeline::standard()
    } else {
        args.pipeline
            .iter()
            .map(|p| p.parse())
            .collect::<Result<Vec<Pipeline>, _>>()?
    };
    if args.reps == 0 {
        return Err(usage("--reps must be positive"));
    }
    let mut request = SimulationRequest::new(model, pipelines, args.reps, args.seed);
    request.n = args.n;
    request.external_n = args.external_n;
    request.caliper = args.caliper;
    request.null_effect = args.null_effect;
    let coverage = args
        .coverage
        .as_ref()
        .map(|p| {
            Ok::<_, CliError>(CoverageRequest {
                pipeline: p.parse()?,
                alpha: args.alpha,
                grid_start: args.grid_start,
                grid_stop: args.grid_stop,
                grid_step: args.grid_step,
            })
        })
        .transpose()?;
    let started = Instant::now();
    let output = with_threads(threads, || run_simulation(&request, coverage.as_ref()))
        .map_err(|e| CliError::Internal(e.to_string()))?;
    write_outputs(&args.out_dir, &output)?;
    eprintln!("{} replications in {:.1?}", args.reps, started.elapsed());
    for s in &output.summary.pipelines {
        eprintln!(
            "  {:<28} ok {:>4}  rejection@0.05 {:?}  ks {:?}",
            s.pipeline, s.ok, s.rejection_rate_05, s.ks_uniform
        );
    }
    Ok(())
}

fn cmd_oracle(args: &OracleArgs, threads: Option<usize>) -> Result<(), CliError> {
    if !(args.scale > 0.0 && args.scale <= 1.0) {
        return Err(usage("--scale must lie in (0, 1]"));
    }
    let full = SuiteConfig::default();
    let s = |n: usize| ((n as f64 * args.scale).ceil() as usize).max(1);
    let cfg = SuiteConfig {
        seed: args.seed,
        identity_instances: s(full.identity_instances),
        closed_form_instances: s(full.closed_form_instances),
        weight_instances: s(full.weight_instances),
        bit_identity_instances: s(full.bit_identity_instances),
        bracket_instances: s(full.bracket_instances),
        dominance_draws: s(full.dominance_draws),
        matching_instances: s(full.matching_instances),
    };
    let results =
        with_threads(threads, || run_suite(&cfg)).map_err(|e| CliError::Internal(e.to_string()))?;
    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a SuiteConfig,
        passed: bool,
        checks: &'a [crate::checks::CheckResult],
    }
    let passed = results.iter().all(|r| r.passed);
    io::ensure_dir(&args.out_dir)?;
    io::write_json(
        &args.out_dir.join("oracle_report.json"),
        &Report {
            config: &cfg,
            passed,
            checks: &results,
        },
    )?;
    for r in &results {
        eprintln!(
            "{} {} ({} instances)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.instances
        );
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::Internal("oracle suite reported failures".into()))
    }
}

fn out_dir(command: &Command) -> &Path {
    match command {
        Command::Match(a) => &a.data.out_dir,
        Command::Analyze(a) => &a.data.out_dir,
        Command::Invert(a) => &a.data.out_dir,
        Command::Simulate(a) => &a.out_dir,
        Command::OracleCheck(a) => &a.out_dir,
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let dir = out_dir(&cli.command);
    io::ensure_dir(dir)?;
    io::write_json(&dir.join("run_config.json"), &cli.command)?;
    match &cli.command {
        Command::Match(a) => cmd_match(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Simulate(a) => cmd_simulate(a, cli.threads),
        Command::OracleCheck(a) => cmd_oracle(a, cli.threads),
    }
}

/// Parse `args`, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
