//! Command-line front end for the `lipgan` laboratory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use lipgan::losses::{LossKind, LossSpec};
use lipgan::metrics::DomainTrace;
use lipgan::trainer::{self, ExperimentConfig, SweepGrid};

pub mod analyze;
pub mod config;
pub mod plot;
pub mod verify;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// A config, run or check that is well-formed but fails.
    #[error("{0}")]
    Invalid(String),
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] lipgan::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(lipgan::Error::Usage(_)) => EXIT_USAGE,
            _ => EXIT_FAILED,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "lipgan", version, about = "Lipschitz-regularized GAN laboratory")]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Experiment config (JSON). Without it the 8-mode ring preset is used.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, value_name = "DIR", default_value = "runs/latest")]
    pub out: PathBuf,
    /// Override a config value by dotted path, e.g. `loss.alpha=1e-9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write its artifacts and plots.
    Train(RunArgs),
    /// Run a grid of losses, scales, k_SN values and seeds.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Grid file: `{"losses": [...], "alphas": [...], "k_sn": [...], "seeds": [...]}`.
        #[arg(long, value_name = "PATH")]
        grid: PathBuf,
    },
    /// Recompute gradient intervals, drift and linearity from a trace.
    Analyze {
        trace: PathBuf,
        /// Loss to analyze under; defaults to the one in the neighbouring config.json.
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Drift window in iterations.
        #[arg(long, default_value_t = 100)]
        window: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run the bound and gradient property checks.
    Verify,
    /// Redraw the SVG plots of an artifact or sweep directory.
    Plot { dir: PathBuf },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let base = match &args.config {
        Some(p) => config::load_json(p)?,
        None => ExperimentConfig::toy_ring(),
    };
    let mut cfg = config::apply_overrides(&base, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn cmd_train(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let art = trainer::train(&cfg)?;
    trainer::write_artifacts(&art, &args.out)?;
    plot::emit_plots(&args.out)?;
    let hull = art.trace.cumulative_hull();
    let m = art.final_metrics();
    println!(
        "{} iterations in {:.1}s; Ω hull {}; Fréchet {}; coverage {}; bound violations {}; artifacts in {}",
        art.trace.len(),
        art.wall_clock_secs,
        hull.map_or("-".into(), |h| format!("[{:.4e}, {:.4e}]", h.lo, h.hi)),
        m.map_or("-".into(), |m| format!("{:.4}", m.frechet)),
        m.and_then(|m| m.coverage).map_or("-".into(), |c| c.to_string()),
        art.bound_violations.len(),
        args.out.display()
    );
    match &art.failure {
        Some(f) => Err(CliError::Invalid(format!(
            "training halted at iteration {}: {}",
            f.iteration, f.reason
        ))),
        None => Ok(()),
    }
}

fn cmd_sweep(args: &RunArgs, grid_path: &Path) -> Result<(), CliError> {
    let mut base_args = args.clone();
    base_args.seed = None;
    let base = load_config(&base_args)?;
    let mut grid: SweepGrid = config::load_json(grid_path)?;
    if let Some(seed) = args.seed {
        grid.seeds = vec![seed];
    }
    let res = trainer::sweep(&base, &grid)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let base_json = serde_json::to_string_pretty(&base).map_err(lipgan::Error::from)?;
    write(&args.out.join("config.json"), &(base_json + "\n"))?;
    let grid_json = serde_json::to_string_pretty(&grid).map_err(lipgan::Error::from)?;
    write(&args.out.join("grid.json"), &(grid_json + "\n"))?;
    write(&args.out.join("sweep.csv"), &res.to_csv())?;
    write(&args.out.join("sweep_summary.csv"), &res.summary_csv())?;
    plot::emit_plots(&args.out)?;
    print!("{}", res.summary_csv());
    let failed = res.rows.iter().filter(|r| r.status != "ok").count();
    log::info!(
        "{} runs, {failed} failed; tables in {}",
        res.rows.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_analyze(
    trace_path: &Path,
    loss: Option<LossKind>,
    alpha: Option<f64>,
    window: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let trace = DomainTrace::read_jsonl(trace_path)?;
    let logged = trace_path
        .parent()
        .map(|d| d.join("config.json"))
        .filter(|p| p.exists())
        .map(|p| config::load_json::<ExperimentConfig>(&p))
        .transpose()?
        .map(|c| c.loss);
    let spec = match (loss, logged) {
        (Some(kind), _) => LossSpec {
            kind,
            alpha: alpha.unwrap_or(1.0),
        },
        (None, Some(s)) => LossSpec {
            alpha: alpha.unwrap_or(s.alpha),
            ..s
        },
        (None, None) => {
            return Err(CliError::Usage("no config.json next to the trace; pass --loss".into()));
        }
    };
    let report = analyze::analyze(&trace, &spec, window)?;
    let json = serde_json::to_string_pretty(&report).map_err(lipgan::Error::from)? + "\n";
    match out {
        Some(p) => {
            write(p, &json)?;
            let show =
                |i: Option<lipgan::losses::Interval>| i.map_or("-".into(), |i| format!("[{:.4}, {:.4}]", i.lo, i.hi));
            println!(
                "{} records; terminal Ω {}; terminal Ψ real {} fake {}; report in {}",
                report.iterations,
                show(report.terminal_omega),
                show(report.terminal_psi_real),
                show(report.terminal_psi_fake),
                p.display()
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn cmd_verify() -> Result<(), CliError> {
    let checks = verify::run_checks();
    for c in &checks {
        println!("{} {}: {}", if c.pass { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{failed} of {} checks failed", checks.len())))
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    // A second initialization (tests calling run_cli repeatedly) is harmless.
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("LIPGAN_LOG")
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on a failed run or check, 2 on a
/// usage error.
pub fn run_cli<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.quiet);
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep { run, grid } => cmd_sweep(run, grid),
        Command::Analyze {
            trace,
            loss,
            alpha,
            window,
            out,
        } => cmd_analyze(trace, *loss, *alpha, *window, out.as_deref()),
        Command::Verify => cmd_verify(),
        Command::Plot { dir } => plot::emit_plots(dir).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
        }),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
