use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use barrons_core::harness::verify_file;
use barrons_core::markets::write_csv;
use barrons_core::{
    run_experiment, sweep, LearnerConfig, LearnerKind, Market, MarketKind, MarketSpec, ProblemDims, RunError,
    RunOptions, SolverConfig, SweepConfig,
};
use clap::{Args, Parser, Subcommand};

const EXIT_VALIDATION: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "barrons", version, about = "Online portfolio selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one learner over one market and write the JSON trace.
    Run(RunArgs),
    /// Run a learner over several horizons and seeds; write a CSV table and a JSON report.
    Sweep(SweepArgs),
    /// Re-check a saved trace offline.
    Verify {
        path: PathBuf,
    },
    /// Write a generated market as CSV.
    Gen(GenArgs),
}

fn parse_learner(s: &str) -> Result<LearnerKind, String> {
    Ok(match s {
        "ada" => LearnerKind::Ada,
        "barrons" => LearnerKind::Barrons,
        "ons" => LearnerKind::Ons,
        "eg" => LearnerKind::Eg,
        "ogd" => LearnerKind::Ogd,
        "softbayes" => LearnerKind::SoftBayes,
        "up-grid" => LearnerKind::UpGrid,
        _ => return Err(format!("unknown learner {s:?}; expected ada, barrons, ons, eg, ogd, softbayes or up-grid")),
    })
}

fn parse_market(s: &str) -> Result<MarketKind, String> {
    Ok(match s {
        "cover_alternating" => MarketKind::CoverAlternating,
        "blowup" => MarketKind::Blowup,
        "iid_lognormal" => MarketKind::IidLognormal,
        "constant" => MarketKind::Constant,
        _ => return Err(format!("unknown market {s:?}; expected cover_alternating, blowup, iid_lognormal or constant")),
    })
}

#[derive(Args)]
struct LearnerArgs {
    #[arg(long, value_parser = parse_learner, default_value = "ada")]
    learner: LearnerKind,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Weight of the uniform portfolio mixed into ONS and EG plays.
    #[arg(long)]
    mix: Option<f64>,
    /// Grid spacing for up-grid.
    #[arg(long)]
    grid_resolution: Option<f64>,
    #[arg(long)]
    solver_tol: Option<f64>,
}

impl LearnerArgs {
    fn config(&self) -> LearnerConfig {
        LearnerConfig {
            kind: Some(self.learner),
            beta: self.beta,
            eta: self.eta,
            gamma: self.gamma,
            mix: self.mix,
            grid_resolution: self.grid_resolution,
        }
    }

    fn solver(&self) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Some(tol) = self.solver_tol {
            cfg.kkt_tol = tol;
        }
        cfg
    }
}

#[derive(Args)]
struct MarketArgs {
    #[arg(long, value_parser = parse_market)]
    market: Option<MarketKind>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Blowup floor.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Blowup flip round.
    #[arg(long)]
    flip_at: Option<usize>,
    /// Lognormal volatility.
    #[arg(long)]
    sigma: Option<f64>,
}

impl MarketArgs {
    fn spec(&self, horizon: usize) -> anyhow::Result<MarketSpec> {
        let Some(kind) = self.market else { bail!("--market is required") };
        let dims = ProblemDims::new(self.n, horizon)?;
        Ok(MarketSpec {
            epsilon: self.epsilon,
            flip_at: self.flip_at,
            sigma: self.sigma,
            ..MarketSpec::new(kind, dims, self.seed.unwrap_or(0))
        })
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    learner: LearnerArgs,
    #[command(flatten)]
    market: MarketArgs,
    /// Market CSV, one round per row; replaces --market.
    #[arg(long, conflicts_with = "market")]
    csv: Option<PathBuf>,
    #[arg(long)]
    t_horizon: Option<usize>,
    /// Trace destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Abort on the first invariant violation.
    #[arg(long)]
    strict: bool,
    /// Include wall-clock metadata in the trace (breaks byte-for-byte reproducibility).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    learner: LearnerArgs,
    #[command(flatten)]
    market: MarketArgs,
    /// Comma-separated horizons, increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    t_values: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    /// Output prefix: writes <out>.csv and <out>.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    market: MarketArgs,
    #[arg(long)]
    t_horizon: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn validation(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_VALIDATION, error }
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let market = match &args.csv {
        Some(path) => Market::from_csv(path, args.market.n).map_err(|e| validation(e.into()))?,
        None => {
            let t = args.t_horizon.ok_or_else(|| validation(anyhow::anyhow!("--t-horizon is required")))?;
            Market::from_spec(&args.market.spec(t).map_err(validation)?).map_err(|e| validation(e.into()))?
        }
    };
    if let (Some(t), Some(_)) = (args.t_horizon, &args.csv) {
        if t != market.dims.horizon() {
            return Err(validation(anyhow::anyhow!("--t-horizon {t} disagrees with {} CSV rows", market.dims.horizon())));
        }
    }
    let keep_meta = |mut r: barrons_core::ExperimentResult| {
        if !args.timings {
            r.metadata = None;
        }
        r
    };
    let opts = RunOptions { strict: args.strict };
    match run_experiment(&args.learner.config(), &market, &args.learner.solver(), opts) {
        Ok(result) => {
            let s = &result.summary;
            eprintln!(
                "regret {:.6} over {} rounds, {} epochs, {} invariant violations",
                s.regret.unwrap_or(f64::NAN),
                s.rounds_completed,
                s.epoch_count,
                s.invariant_violations.len()
            );
            write_output(args.out.as_deref(), &keep_meta(result).to_json()).map_err(validation)
        }
        Err(RunError::Validation(m)) => Err(validation(anyhow::anyhow!(m))),
        Err(e) => {
            let code = match e {
                RunError::Solver { .. } => EXIT_SOLVER,
                _ => EXIT_VERIFY,
            };
            if let Some(partial) = e.partial() {
                write_output(args.out.as_deref(), &keep_meta(partial.clone()).to_json()).map_err(validation)?;
            }
            Err(Failure { code, error: e.into() })
        }
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let Some(kind) = args.market.market else {
        return Err(validation(anyhow::anyhow!("--market is required")));
    };
    if args.t_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(validation(anyhow::anyhow!("--t-values must be increasing")));
    }
    let cfg = SweepConfig {
        learner: args.learner.config(),
        market: kind,
        assets: args.market.n,
        horizons: args.t_values.clone(),
        repetitions: args.repetitions,
        base_seed: args.market.seed.unwrap_or(0),
        epsilon: args.market.epsilon,
        sigma: args.market.sigma,
        solver: args.learner.solver(),
    };
    let report = sweep(&cfg).map_err(|e| validation(e.into()))?;
    let csv_path = args.out.with_extension("csv");
    let file = fs::File::create(&csv_path).map_err(|e| validation(e.into()))?;
    report.write_csv(file).map_err(|e| validation(e.into()))?;
    fs::write(args.out.with_extension("json"), report.to_json()).map_err(|e| validation(e.into()))?;
    for a in &report.aggregates {
        let growth = a.growth_ratio.map_or_else(|| "-".to_string(), |g| format!("{g:.3}"));
        eprintln!("T={:<6} runs={} mean regret {:.6} growth {growth}", a.horizon, a.runs, a.mean_regret);
    }
    for f in &report.failures {
        eprintln!("T={} seed={}: {}", f.horizon, f.seed, f.error);
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: EXIT_SOLVER, error: anyhow::anyhow!("{} runs failed", report.failures.len()) })
    }
}

fn cmd_verify(path: &Path) -> Result<(), Failure> {
    let report = verify_file(path).map_err(|e| validation(e.into()))?;
    for f in &report.failures {
        match f.round {
            Some(r) => println!("FAIL {} at round {r}: {}", f.check, f.detail),
            None => println!("FAIL {}: {}", f.check, f.detail),
        }
    }
    println!("{} checks, {} failures", report.checks_run, report.failures.len());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure { code: EXIT_VERIFY, error: anyhow::anyhow!("verification failed") })
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    let spec = args.market.spec(args.t_horizon).map_err(validation)?;
    let rounds = barrons_core::markets::generate(&spec).map_err(|e| validation(e.into()))?;
    let mut buf = Vec::new();
    write_csv(&mut buf, &rounds).map_err(|e| validation(e.into()))?;
    let text = String::from_utf8(buf).expect("csv output is utf-8");
    match &args.out {
        Some(path) => fs::write(path, text).map_err(|e| validation(e.into())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify { path } => cmd_verify(&path),
        Command::Gen(a) => cmd_gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
