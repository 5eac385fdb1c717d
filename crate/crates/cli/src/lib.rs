//! Command-line front end: argument parsing, config overrides and dispatch.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wfno_core::sampler::SolverMode;

use crate::config::RunConfig;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "wfno", version, about = "Diffusion super-resolution with weighted Fourier neural operators")]
pub struct Cli {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "F64")]
    pub scale: Option<f64>,
    /// Optimizer steps for `train`, solver steps otherwise.
    #[arg(long, global = true, value_name = "N")]
    pub steps: Option<u64>,
    #[arg(long, global = true, value_name = "rk4-grid|rk45")]
    pub mode: Option<SolverMode>,
    /// Measure on BT.601 luma instead of RGB.
    #[arg(long, global = true)]
    pub y_channel: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write bicubic low-resolution copies of a directory plus a manifest.
    Degrade {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the score network.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from `run_dir/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Super-resolve one image.
    Sample {
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// PSNR/SSIM of outputs against references (two files or two directories).
    Eval {
        output: PathBuf,
        reference: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time repeated sampling of one image.
    Bench {
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every layer gradient.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fit the adaptive time-step weights and store them beside the checkpoint.
    AtsFit {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(wfno_core::Error),
    /// The command ran but its check failed.
    Failed(String),
}

impl From<wfno_core::Error> for CliError {
    fn from(e: wfno_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) | CliError::Failed(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

/// The config file (or the desk defaults) with command-line overrides applied.
pub fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.scale {
        cfg.scale = s;
    }
    if let Some(n) = cli.steps {
        match cli.command {
            Command::Train { .. } => cfg.train.steps = n,
            _ => {
                cfg.sampler.steps = usize::try_from(n).map_err(|_| CliError::Usage("--steps is too large".into()))?
            }
        }
    }
    if let Some(m) = cli.mode {
        cfg.sampler.mode = m;
    }
    if cli.y_channel {
        cfg.eval.y_channel = true;
    }
    if let Command::Bench { runs: Some(r), .. } = cli.command {
        cfg.eval.runs = r;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Cap internal parallelism from `WFNO_THREADS`.
pub fn configure_threads(value: Option<&str>) -> Result<(), CliError> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("WFNO_THREADS must be a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn default_report(cfg: &RunConfig, given: &Option<PathBuf>, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.paths.output_dir.join(name))
}

fn sample_paths(cfg: &RunConfig, input: &Path, output: &Option<PathBuf>, report: &Option<PathBuf>) -> (PathBuf, PathBuf) {
    let out = output.clone().unwrap_or_else(|| {
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        cfg.paths.output_dir.join(format!("{stem}_sr_x{}.png", cfg.scale))
    });
    let rep = report.clone().unwrap_or_else(|| out.with_extension("json"));
    (out, rep)
}

/// Run one parsed command, printing its table and report location.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::Degrade { input, output } => {
            let input = input.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            let output = output
                .clone()
                .unwrap_or_else(|| cfg.paths.output_dir.join(format!("lr_x{}", cfg.scale)));
            let rows = commands::cmd_degrade(&cfg, &input, &output)?;
            println!("wrote {} images and {}", rows.len(), output.join("manifest.csv").display());
        }
        Command::Train { data, run_dir, resume } => {
            let data = data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            let run_dir = run_dir.clone().unwrap_or_else(|| cfg.paths.run_dir.clone());
            let r = commands::cmd_train(&cfg, &data, &run_dir, *resume)?;
            println!(
                "steps {}..{}  epochs {}  probe loss {:.4e} -> {:.4e}  best val {}  {:.1} s{}",
                r.start_step,
                r.steps,
                r.epochs,
                r.initial_probe_loss,
                r.final_probe_loss,
                r.best_val.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into()),
                r.wall_s,
                if r.stopped_early { "  (stopped early)" } else { "" }
            );
            println!("{}", commands::compact(&r));
        }
        Command::Sample { input, checkpoint, output, report } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint());
            let (out, rep) = sample_paths(&cfg, input, output, report);
            let s = commands::cmd_sample(&cfg, input, &ckpt, &out, &rep)?;
            println!(
                "{} -> {} ({}×{})  steps {}  nfe {}  {:.1} ms",
                s.input, s.output, s.height, s.width, s.report.steps, s.report.nfe, s.report.wall_ms
            );
        }
        Command::Eval { output, reference, report, csv } => {
            let s = commands::cmd_eval(&cfg, output, reference, csv.as_deref())?;
            print!("{}", commands::eval_table(&s));
            commands::write_report(&default_report(&cfg, report, "eval.json"), &s)?;
        }
        Command::Bench { input, checkpoint, report, .. } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint());
            let b = commands::cmd_bench(&cfg, input, &ckpt)?;
            println!("{:<10} {:>6} {:>6} {:>10} {:>10} {:>10} {:>10}", "mode", "steps", "nfe", "mean ms", "std ms", "min ms", "max ms");
            let mode = match b.mode {
                SolverMode::Rk4Grid => "rk4-grid",
                SolverMode::Rk45 => "rk45",
            };
            let t = &b.timing;
            println!(
                "{:<10} {:>6} {:>6} {:>10.2} {:>10.2} {:>10.2} {:>10.2}   ({} runs)",
                mode, b.steps, t.nfe, t.mean_ms, t.std_ms, t.min_ms, t.max_ms, t.runs
            );
            commands::write_report(&default_report(&cfg, report, "bench.json"), &b)?;
        }
        Command::Gradcheck { seeds, report } => {
            if *seeds == 0 {
                return Err(CliError::Usage("--seeds must be positive".into()));
            }
            let rows = commands::cmd_gradcheck(&cfg, *seeds)?;
            print!("{}", commands::gradcheck_table(&rows));
            commands::write_report(&default_report(&cfg, report, "gradcheck.json"), &rows)?;
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} gradient checks exceeded tolerance")));
            }
        }
        Command::AtsFit { checkpoint, data, report } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint());
            let data = data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            let r = commands::cmd_ats_fit(&cfg, &ckpt, &data)?;
            println!(
                "objective {:.4e} -> {:.4e} over {} problems ({} of {} steps accepted)  omega {:?}",
                r.report.initial_objective,
                r.report.final_objective,
                r.problems,
                r.report.accepted,
                r.report.iterations,
                r.report.omega
            );
            println!("wrote {}", r.sidecar);
            commands::write_report(&default_report(&cfg, report, "ats_fit.json"), &r)?;
        }
    }
    Ok(())
}

/// Parse `args`, run, and map the outcome to the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads(std::env::var("WFNO_THREADS").ok().as_deref()).and_then(|_| execute(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wfno: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
