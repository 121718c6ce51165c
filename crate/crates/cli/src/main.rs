//! `vfagg`: synthesize cohorts, build expert pools, tune learning rates,
//! predict and run the cross-validated evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use thiserror::Error;

use vfagg::aggregation::{flat_predict_with, hierarchical_predict_with, rg_optimal_eta, HierarchicalEta, UpdateRule};
use vfagg::config::{EtaName, EtaSelection, RunConfig, Strategy, StrategySelection};
use vfagg::evaluation::{build_pools, run_experiment, tune_all, ExperimentReport, TuningCurve};
use vfagg::experts::{fit_pool_to_target, ExpertPool, ExpertsDocument};
use vfagg::field::{rmse, PatientSeries};
use vfagg::io::{parse_cohort_config, parse_experts, parse_run_config, read_dataset, write_dataset};
use vfagg::report;
use vfagg::synthdata::{generate_cohort, CohortConfig};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Lib {
        context: String,
        #[source]
        source: vfagg::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib { source, .. } if source.is_data_error() || matches!(source, vfagg::Error::Io(_)) => 2,
            CliError::Lib { .. } => 3,
        }
    }
}

trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for vfagg::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Lib { context: what(), source })
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::Lib {
            context: what(),
            source: e.into(),
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "vfagg", version, about = "Aggregation of clustering-based visual-field predictors")]
struct Cli {
    /// Overrides the seed of every config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort as a JSON-lines dataset.
    Synth(SynthArgs),
    /// Build the expert pools on a dataset and write them as JSON.
    Experts(ExpertsArgs),
    /// Tune the IR-optimal learning rates by cross-validation.
    Tune(TuneArgs),
    /// Predict the next field of every patient with a saved expert set.
    Predict(PredictArgs),
    /// Run the full cross-validated evaluation and write the reports.
    Evaluate(EvaluateArgs),
    /// Render the text report of a finished evaluation.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Cohort config (flat JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Planted ground truth; defaults to `<out>.truth.json`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Starting point when no config file is given.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    #[arg(long)]
    patients: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Preset {
    Default,
    /// Pool-size skew; evaluate it with `--k` equal to the cohort's `k_true`.
    Skew,
}

/// Run config file plus one override per field.
#[derive(Debug, Args)]
struct RunArgs {
    /// Run config (flat JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    /// Spatial clusters.
    #[arg(long)]
    k: Option<usize>,
    /// Slope clusters per spatial cluster.
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    min_cluster_size: Option<usize>,
    #[arg(long)]
    eta_grid_min: Option<f64>,
    #[arg(long)]
    eta_grid_max: Option<f64>,
    #[arg(long)]
    eta_grid_points: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    inner_folds: Option<usize>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// `ir`, `rg`, `both` or a fixed nonnegative value.
    #[arg(long)]
    eta: Option<EtaSelection>,
    #[arg(long, value_enum)]
    update: Option<UpdateArg>,
    #[arg(long)]
    kmeans_restarts: Option<usize>,
    #[arg(long)]
    kmeans_max_iter: Option<usize>,
    #[arg(long)]
    kmeans_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum StrategyArg {
    Lr,
    Sc,
    Tslr,
    Flat,
    Hier,
    All,
}

impl From<StrategyArg> for StrategySelection {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Lr => StrategySelection::Lr,
            StrategyArg::Sc => StrategySelection::Sc,
            StrategyArg::Tslr => StrategySelection::Tslr,
            StrategyArg::Flat => StrategySelection::Flat,
            StrategyArg::Hier => StrategySelection::Hier,
            StrategyArg::All => StrategySelection::All,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum UpdateArg {
    Batch,
    Online,
}

impl From<UpdateArg> for UpdateRule {
    fn from(u: UpdateArg) -> Self {
        match u {
            UpdateArg::Batch => UpdateRule::Batch,
            UpdateArg::Online => UpdateRule::Online,
        }
    }
}

#[derive(Debug, Args)]
struct ExpertsArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Expert set written by `experts`.
    #[arg(long)]
    experts: PathBuf,
    /// Target patients.
    #[arg(long)]
    dataset: PathBuf,
    /// Observations used as the prefix; defaults to all but the last one,
    /// which is then scored.
    #[arg(long)]
    prefix: Option<usize>,
    /// Predict at this date instead of the observation after the prefix.
    #[arg(long)]
    date: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// `summary.json` or the directory holding it.
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).context(|| format!("reading {}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<(), CliError> {
    let what = || path.map_or_else(|| "writing stdout".to_string(), |p| format!("writing {}", p.display()));
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(vfagg::Error::from)
        .context(what)?;
    out.write_all(b"\n").and_then(|_| out.flush()).context(what)
}

impl RunArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => parse_run_config(&read_text(p)?).context(|| format!("run config {}", p.display()))?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$field = v.into();
                }
            )*};
        }
        set!(
            dim,
            k,
            c,
            min_cluster_size,
            eta_grid_min,
            eta_grid_max,
            eta_grid_points,
            folds,
            inner_folds,
            n_min,
            n_max,
            strategy,
            eta,
            update,
            kmeans_restarts,
            kmeans_max_iter,
            kmeans_tol
        );
        if let Some(s) = seed {
            c.seed = s;
        }
        c.validate().context(|| "run config".to_string())?;
        Ok(c)
    }
}

fn load_dataset(path: &Path, config: &RunConfig) -> Result<Vec<PatientSeries>, CliError> {
    let cohort = read_dataset(path, Some(config.dim)).context(|| format!("dataset {}", path.display()))?;
    info!("read {} patients from {}", cohort.len(), path.display());
    Ok(cohort)
}

fn synth(args: &SynthArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(p) => parse_cohort_config(&read_text(p)?).context(|| format!("cohort config {}", p.display()))?,
        None => match args.preset {
            Preset::Default => CohortConfig::default(),
            Preset::Skew => CohortConfig::skewed(),
        },
    };
    if let Some(n) = args.patients {
        config.patients = n;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let (cohort, truth) = generate_cohort(&config).context(|| "cohort config".to_string())?;
    let mut out = output(Some(&args.out))?;
    write_dataset(&mut out, &cohort).context(|| format!("writing {}", args.out.display()))?;
    out.flush().context(|| format!("writing {}", args.out.display()))?;
    let sidecar = args.truth.clone().unwrap_or_else(|| {
        let mut name = args.out.clone().into_os_string();
        name.push(".truth.json");
        PathBuf::from(name)
    });
    write_json(Some(&sidecar), &truth)?;
    info!("wrote {} patients to {}", cohort.len(), args.out.display());
    Ok(())
}

fn experts(args: &ExpertsArgs, seed: Option<u64>) -> Result<(), CliError> {
    let config = args.run.resolve(seed)?;
    let cohort = load_dataset(&args.dataset, &config)?;
    let mut methods: Vec<_> = config.strategy.strategies().iter().flat_map(|s| s.methods()).collect();
    methods.sort();
    methods.dedup();
    let pools = build_pools(&cohort, &methods, &config, config.seed)
        .context(|| "building expert pools".to_string())?
        .ok_or_else(|| CliError::Usage("no spatial cluster reaches min_cluster_size; lower k or min_cluster_size".into()))?;
    for p in &pools.pools {
        info!("{} pool: {} experts", p.method(), p.len());
    }
    write_json(args.out.as_deref(), &ExpertsDocument::from_pools(&pools.pools))
}

fn tune(args: &TuneArgs, seed: Option<u64>) -> Result<(), CliError> {
    let config = args.run.resolve(seed)?;
    let cohort = load_dataset(&args.dataset, &config)?;
    let tuning = tune_all(&cohort, &config.strategy.strategies(), &config, config.seed).context(|| "tuning".to_string())?;
    let curves: Vec<&TuningCurve> = tuning.curves.values().collect();
    for c in &curves {
        info!("{} n={}: eta*sqrt(n) = {}", c.strategy, c.n, report::sig6(c.multiplier()));
    }
    write_json(args.out.as_deref(), &curves)
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    strategy: &'static str,
    n: usize,
    date: f64,
    eta: Vec<f64>,
    values: Vec<f64>,
    /// Against the observation at `date`, when there is one.
    rmse: Option<f64>,
}

/// Learning rates for `strategy`: level-one rates first, then the top level.
fn predict_etas(strategy: Strategy, eta: EtaSelection, pools: &[ExpertPool], n: usize) -> vfagg::Result<Vec<f64>> {
    let sizes: Vec<usize> = pools.iter().map(ExpertPool::len).collect();
    if let Some(v) = eta.fixed() {
        return Ok(match strategy {
            Strategy::Hierarchical => vec![v; pools.len() + 1],
            _ => vec![v],
        });
    }
    Ok(match strategy {
        Strategy::Single(_) => vec![rg_optimal_eta(sizes[0], n)?],
        Strategy::Flat => vec![rg_optimal_eta(sizes.iter().sum(), n)?],
        Strategy::Hierarchical => {
            let h = HierarchicalEta::regret_optimal(&sizes, n)?;
            h.level1.into_iter().chain([h.level2]).collect()
        }
    })
}

fn predict(args: &PredictArgs, seed: Option<u64>) -> Result<(), CliError> {
    let config = args.run.resolve(seed)?;
    if config.eta == EtaSelection::Named(EtaName::Ir) {
        return Err(CliError::Usage(
            "predict takes --eta rg or a fixed value; run `tune` to find the IR-optimal one".into(),
        ));
    }
    let all_pools = parse_experts(&read_text(&args.experts)?).context(|| format!("experts {}", args.experts.display()))?;
    let cohort = load_dataset(&args.dataset, &config)?;
    let mut out = output(args.out.as_deref())?;
    let what = || "writing predictions".to_string();
    for strategy in config.strategy.strategies() {
        let pools: Vec<ExpertPool> = all_pools
            .iter()
            .filter(|p| strategy.methods().contains(&p.method()))
            .cloned()
            .collect();
        if pools.is_empty() {
            return Err(CliError::Usage(format!("the expert set has no pool for strategy `{strategy}`")));
        }
        for series in &cohort {
            let n = args.prefix.unwrap_or(series.len().saturating_sub(1)).min(series.len());
            if n == 0 {
                return Err(CliError::Usage(format!("patient `{}` leaves an empty prefix", series.id())));
            }
            let prefix = series.prefix(n);
            let (date, observed) = match args.date {
                Some(d) => (d, None),
                None if n < series.len() => {
                    let obs = &series.observations()[n];
                    (obs.date, Some(&obs.field))
                }
                None => return Err(CliError::Usage(format!("patient `{}` has no observation after the prefix; pass --date", series.id()))),
            };
            let ctx = || format!("patient `{}`", series.id());
            let fitted = pools
                .iter()
                .map(|p| fit_pool_to_target(p, prefix))
                .collect::<vfagg::Result<Vec<_>>>()
                .context(ctx)?;
            let eta = predict_etas(strategy, config.eta, &fitted, n).context(ctx)?;
            let field = match strategy {
                Strategy::Hierarchical => {
                    let (top, level1) = eta.split_last().expect("one rate per level");
                    let etas = HierarchicalEta {
                        level1: level1.to_vec(),
                        level2: *top,
                    };
                    hierarchical_predict_with(&fitted, prefix, &etas, config.update, date)
                }
                _ => flat_predict_with(&fitted, prefix, eta[0], config.update, date),
            }
            .context(ctx)?;
            let rmse = observed.map(|o| rmse(&field, o)).transpose().context(ctx)?;
            let line = Prediction {
                id: series.id(),
                strategy: strategy.label(),
                n,
                date,
                eta,
                values: field.into_inner(),
                rmse,
            };
            serde_json::to_writer(&mut out, &line).map_err(vfagg::Error::from).context(what)?;
            out.write_all(b"\n").context(what)?;
        }
    }
    out.flush().context(what)
}

fn evaluate(args: &EvaluateArgs, seed: Option<u64>) -> Result<(), CliError> {
    let config = args.run.resolve(seed)?;
    let cohort = load_dataset(&args.dataset, &config)?;
    let report = run_experiment(&cohort, &config).context(|| "evaluation".to_string())?;
    report::write_all(&args.out, &report).context(|| format!("writing reports to {}", args.out.display()))?;
    print!("{}", report::render_text(&report));
    Ok(())
}

fn render(args: &ReportArgs) -> Result<(), CliError> {
    let path = if args.input.is_dir() {
        args.input.join("summary.json")
    } else {
        args.input.clone()
    };
    let report: ExperimentReport = serde_json::from_str(&read_text(&path)?)
        .map_err(vfagg::Error::from)
        .context(|| format!("summary {}", path.display()))?;
    let mut out = output(args.out.as_deref())?;
    let what = || "writing report".to_string();
    out.write_all(report::render_text(&report).as_bytes()).context(what)?;
    out.flush().context(what)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Experts(a) => experts(a, cli.seed),
        Command::Tune(a) => tune(a, cli.seed),
        Command::Predict(a) => predict(a, cli.seed),
        Command::Evaluate(a) => evaluate(a, cli.seed),
        Command::Report(a) => render(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
