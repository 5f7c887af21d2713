//! `smpca`: simulate, fit, impute, forecast, benchmark and evaluate.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smpca_core::benchmark::{run_benchmark, BenchmarkConfig};
use smpca_core::tasks::{fit_vars, forecast, impute};
use smpca_core::{
    fit, gen_panel, load_model, nmse_matched, save_model, validate_observations, Case, ErrorKind, Issue, Method,
    NRange, ObservationSet,
};

use config::RunConfig;

#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<smpca_core::Error> for Failure {
    fn from(e: smpca_core::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Spectral marginal PCA for multivariate functional time series.
///
/// Exit status: 0 success, 2 configuration or validation error, 3 data or
/// model file error, 4 numerical failure.
#[derive(Parser, Debug)]
#[command(name = "smpca", version)]
struct Cli {
    /// Worker threads for frequency loops and replicates [default: all cores]
    #[arg(long, global = true, env = "SPECTRAL_MPCA_THREADS")]
    threads: Option<usize>,

    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated panel and its latent truth
    Simulate(SimulateArgs),
    /// Estimate filters and scores from an observation CSV
    Fit(FitArgs),
    /// Reconstruct the fitted curves on the model grid
    Impute(ImputeArgs),
    /// Forecast curves past the end of the panel
    Forecast(ForecastArgs),
    /// Run a Monte Carlo scenario file
    Benchmark(BenchmarkArgs),
    /// NMSE of an estimate CSV against a truth CSV, matched by subject and curve
    Eval(EvalArgs),
    /// Print the JSON schema of the configuration file
    #[command(hide = true)]
    Schema,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON configuration (see config.schema.json)
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Simulation case: 1 Gaussian, 2 heavy-tailed noise, 3 nonlinear scores
    #[arg(long, value_parser = parse_case)]
    case: Option<Case>,
    /// Number of subjects
    #[arg(long)]
    p: Option<usize>,
    /// Curves per subject written to the observation file
    #[arg(long = "curves", short = 'J')]
    j: Option<usize>,
    /// Observations per curve, `min-max` (e.g. 5-10)
    #[arg(long)]
    nrange: Option<NRange>,
    #[arg(long)]
    seed: Option<u64>,
    /// Noise variance as a fraction of the curve energy
    #[arg(long)]
    noise_fraction: Option<f64>,
    /// Extra curves generated past J; they appear in the truth file only
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    /// Observation CSV to write
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Latent truth CSV to write
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Observation CSV
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// spectral_mpca or individual_spectral
    #[arg(long)]
    method: Option<Method>,
    /// Pin the number of components
    #[arg(long)]
    k: Option<usize>,
    /// Pin the Bartlett window length
    #[arg(long)]
    h_max: Option<usize>,
    /// Model artifact to write
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, short)]
    model: Option<PathBuf>,
    /// Output CSV [default: stdout]
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, short)]
    model: Option<PathBuf>,
    /// Number of curves to forecast
    #[arg(long)]
    horizon: usize,
    /// VAR order cap [default: min(5, T/(3p))]
    #[arg(long)]
    var_max_order: Option<usize>,
    /// Output CSV [default: stdout]
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Scenario file (JSON)
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Long-format results CSV
    #[arg(long, short, default_value = "results.csv")]
    out: PathBuf,
    /// Aggregated CSV [default: <out stem>_summary.csv]
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
}

fn parse_case(s: &str) -> Result<Case, String> {
    Case::try_from(s.parse::<u8>().map_err(|e| e.to_string())?)
}

fn required(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.ok_or_else(|| Failure::config(format!("{what} path is required (flag or `paths` in the config)")))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::data(format!("cannot create {}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn read_observations(path: &Path) -> CliResult<ObservationSet> {
    let file = File::open(path).map_err(|e| Failure::data(format!("cannot open {}: {e}", path.display())))?;
    ObservationSet::read_csv(std::io::BufReader::new(file))
        .map_err(|e| Failure { message: format!("{}: {e}", path.display()), ..Failure::from(e) })
}

fn simulate(args: SimulateArgs) -> CliResult {
    let mut cfg = config::load(args.config.config.as_deref())?;
    let sim = &mut cfg.simulate;
    if let Some(v) = args.case {
        sim.case = v;
    }
    if let Some(v) = args.p {
        sim.p = v;
    }
    if let Some(v) = args.j {
        sim.j = v;
    }
    if let Some(v) = args.nrange {
        sim.nrange = v;
    }
    if let Some(v) = args.seed {
        sim.seed = v;
    }
    if let Some(v) = args.noise_fraction {
        sim.noise_fraction = v;
    }
    sim.validate()?;
    let out = required(args.out.or(cfg.paths.observations), "observation output")?;
    let truth_path = args.truth.or(cfg.paths.truth);
    let j = sim.j;
    let mut gen = sim.clone();
    gen.j += args.holdout;
    let panel = gen_panel(&gen)?;
    let obs = if args.holdout > 0 { panel.observations.truncate_curves(j)? } else { panel.observations };
    obs.write_csv(create(&out)?)?;
    if let Some(path) = truth_path {
        panel.latent.write_csv(create(&path)?, 1)?;
    }
    eprintln!(
        "simulated case {} with p = {}, J = {j} (+{} held out), {} observations",
        gen.case,
        gen.p,
        args.holdout,
        obs.total_count()
    );
    Ok(())
}

fn describe_issue(issue: &Issue) -> String {
    match issue {
        Issue::TimeOutOfRange { subject, curve, time } => {
            format!("subject {} curve {}: time {time} outside [0, 1]", subject + 1, curve + 1)
        }
        Issue::NonFiniteValue { subject, curve } => format!("subject {} curve {}: non-finite value", subject + 1, curve + 1),
        Issue::EmptyCurve { subject, curve } => format!("subject {} curve {}: no observations", subject + 1, curve + 1),
    }
}

fn fit_cmd(args: FitArgs) -> CliResult {
    let mut cfg: RunConfig = config::load(args.config.config.as_deref())?;
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(k) = args.k {
        cfg.fit.selection.k = Some(k);
        cfg.fit.selection.k_max = cfg.fit.selection.k_max.max(k);
    }
    if let Some(h) = args.h_max {
        cfg.fit.selection.h_max = Some(h);
    }
    cfg.fit.validate()?;
    let input = required(args.input.or(cfg.paths.observations), "observation input")?;
    let out = required(args.out.or(cfg.paths.model), "model output")?;
    let obs = read_observations(&input)?;
    let report = validate_observations(&obs);
    if let Some(first) = report.errors().next() {
        let n = report.errors().count();
        return Err(Failure::data(format!("{}: {} ({n} problem(s) in total)", input.display(), describe_issue(first))));
    }
    for issue in report.issues.iter().take(5) {
        log::warn!("{}", describe_issue(issue));
    }
    let model = fit(&obs, &cfg.fit, cfg.method)?;
    save_model(&model, &out)?;
    let m = &model.meta;
    println!("method        {}", model.method.name());
    println!("p x J         {} x {}", m.p, m.j);
    println!("K             {}", m.k);
    println!("L_k           {:?}", m.lags);
    println!("h_max         {}", m.h_max);
    println!("filter norms  {:?}", m.filter_norms.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    println!("noise var     {:?}", model.noise.values.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>());
    println!("solver        {} iterations, residual {:.2e}", m.solve.iterations, m.solve.relative_residual);
    Ok(())
}

fn impute_cmd(args: ImputeArgs) -> CliResult {
    let cfg = config::load(args.config.config.as_deref())?;
    let model = load_model(&required(args.model.or(cfg.paths.model), "model")?)?;
    let curves = impute(&model);
    curves.write_csv(output(args.out.or(cfg.paths.output).as_deref())?, 1)?;
    Ok(())
}

fn forecast_cmd(args: ForecastArgs) -> CliResult {
    if args.horizon == 0 {
        return Err(Failure::config("--horizon must be at least 1"));
    }
    let cfg = config::load(args.config.config.as_deref())?;
    let model = load_model(&required(args.model.or(cfg.paths.model), "model")?)?;
    let cap = args.var_max_order.or(cfg.fit.var_max_order).or(model.config.var_max_order);
    if cap == Some(0) {
        return Err(Failure::config("--var-max-order must be at least 1"));
    }
    let vars = fit_vars(&model, cap)?;
    for (k, v) in vars.iter().enumerate() {
        log::info!("component {}: VAR({}) spectral radius {:.3}", k + 1, v.order, v.spectral_radius);
    }
    let curves = forecast(&model, &vars, args.horizon)?;
    curves.write_csv(output(args.out.or(cfg.paths.output).as_deref())?, model.j() + 1)?;
    Ok(())
}

fn benchmark_cmd(args: BenchmarkArgs) -> CliResult {
    let mut cfg: BenchmarkConfig = match &args.config {
        Some(p) => config::read_json(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let summary = args.summary.unwrap_or_else(|| {
        let stem = args.out.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
        args.out.with_file_name(format!("{stem}_summary.csv"))
    });
    let results = run_benchmark(&cfg)?;
    results.write_records(create(&args.out)?)?;
    results.write_summary(create(&summary)?)?;
    for row in results.summary() {
        println!(
            "case {} J={:<3} N={:<6} {:<20} {:<6} mean {:.4} (sd {:.4}, n {}, failed {})",
            row.case,
            row.j,
            row.nrange.to_string(),
            row.method.name(),
            row.metric.name(),
            row.mean,
            row.sd,
            row.n,
            row.failed
        );
    }
    if !results.failures.is_empty() {
        eprintln!("{} replicate(s) failed; see the log for details", results.failures.len());
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> CliResult {
    let truth = read_observations(&args.truth)?;
    let est = read_observations(&args.estimate)?;
    println!("nmse {}", nmse_matched(&truth, &est)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot configure thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Impute(a) => impute_cmd(a),
        Command::Forecast(a) => forecast_cmd(a),
        Command::Benchmark(a) => benchmark_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&config::schema()).expect("schema serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
