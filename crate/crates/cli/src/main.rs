//! `horizon`: generate tasks, run experiments, summarize runs and query
//! the closed-form horizon model.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use horizon_core::agents::AgentError;
use horizon_core::experiments::{self, ExperimentConfig, ExperimentOutcome};
use horizon_core::metrics::Horizon;
use horizon_core::store::{self, RunDir};
use horizon_core::{theory, Error};

#[derive(Parser)]
#[command(name = "horizon", version, about = "Long-horizon execution benchmark harness")]
struct Cli {
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the rollout plans of a config as JSON lines.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a turns-scaling experiment.
    Run {
        #[command(flatten)]
        exec: ExecArgs,
        /// Exit with status 3 if the horizon (in turns, first threshold) is
        /// below this value.
        #[arg(long, value_name = "TURNS")]
        assert_horizon: Option<usize>,
    },
    /// Run a counterfactual history-injection experiment.
    Counterfactual {
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Search the largest turn complexity meeting the accuracy threshold.
    SearchK {
        #[command(flatten)]
        exec: ExecArgs,
        /// Exit with status 3 if the found K is below this value.
        #[arg(long, value_name = "K")]
        assert_max_k: Option<usize>,
    },
    /// Run a fixed-operations, context-window or decomposed-task sweep.
    Sweep {
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Closed-form horizon length for step accuracy p at success rate s.
    Theory(TheoryArgs),
    /// Recompute summary.csv and results.json from a run's transcripts.
    Summarize {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        /// Also check the run's files against its manifest.
        #[arg(long)]
        verify: bool,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value after parsing, e.g. `agent.p=1.0`.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ExecArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory; defaults to the config's output_dir or runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rollouts in flight at once; defaults to the config's `parallel`.
    #[arg(long)]
    parallel: Option<usize>,
    /// Validate the config and print the resolved plan without calling any agent.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct TheoryArgs {
    /// Per-step accuracy in (0, 1).
    #[arg(long)]
    p: Option<f64>,
    /// Success-rate threshold in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    s: f64,
    /// Print the step accuracy needed for this horizon instead.
    #[arg(long, value_name = "STEPS")]
    horizon: Option<f64>,
    /// Print the growth projection for t = 0..=T.
    #[arg(long, value_name = "T")]
    growth: Option<u32>,
    /// Cross-check with this many Monte-Carlo chains.
    #[arg(long, value_name = "CHAINS")]
    monte_carlo: Option<usize>,
    /// Seed for the Monte-Carlo chains.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure categories, mapped to exit codes 1, 2 and 3.
enum Failure {
    Config(String),
    Runtime(String),
    Threshold(String),
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (category, msg, code) = match self {
            Failure::Config(m) => ("config", m, 1),
            Failure::Runtime(m) => ("runtime", m, 2),
            Failure::Threshold(m) => ("threshold", m, 3),
        };
        eprintln!("error[{category}]: {msg}");
        ExitCode::from(code)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Wordlist { .. } => Failure::Config(e.to_string()),
            Error::Agent(AgentError::MissingCredential { .. }) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn stdout_line(text: impl AsRef<str>) -> CliResult {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", text.as_ref()).map_err(|e| Failure::Runtime(format!("stdout: {e}")))
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    Ok(experiments::load_config(&args.config, &args.overrides)?)
}

fn run_dir(exec: &ExecArgs, cfg: &ExperimentConfig) -> PathBuf {
    exec.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

fn dry_run(cfg: &ExperimentConfig, dir: &Path, parallel: usize) -> CliResult {
    let plans = experiments::plan_rollouts(cfg)?;
    let toml = cfg.to_toml()?;
    stdout_line(format!("# resolved config ({} rollouts planned, output {})", plans.len(), dir.display()))?;
    stdout_line(format!("# parallel = {parallel}, experiment = {}", cfg.experiment.name()))?;
    if let Some(p) = plans.first() {
        stdout_line(format!(
            "# rollout 0: {} turns of {} steps, key checksum {:016x}",
            p.turns.len(),
            p.turn_complexity,
            p.key_checksum()
        ))?;
    }
    stdout_line(toml.trim_end())
}

fn fmt_horizon(h: Horizon) -> String {
    match h {
        Horizon::Reached(t) => t.to_string(),
        Horizon::NotReached => "not reached".into(),
    }
}

fn execute(exec: &ExecArgs, accept: &[&str]) -> Result<Option<ExperimentOutcome>, Failure> {
    let cfg = load(&exec.config)?;
    if !accept.contains(&cfg.experiment.name()) {
        return Err(Failure::Config(format!(
            "experiment.kind = {} cannot be run by this subcommand (expected {})",
            cfg.experiment.name(),
            accept.join(" or ")
        )));
    }
    let parallel = exec.parallel.unwrap_or(cfg.parallel);
    if parallel == 0 {
        return Err(Failure::Config("--parallel must be >= 1".into()));
    }
    let dir = run_dir(exec, &cfg);
    if exec.dry_run {
        dry_run(&cfg, &dir, parallel)?;
        return Ok(None);
    }
    let outcome = experiments::run_experiment(&cfg, &dir, parallel, &exec.config.overrides)?;
    stdout_line(format!("run directory: {}", dir.display()))?;
    match &outcome {
        ExperimentOutcome::TurnsScaling(r) => {
            for h in &r.results.horizons {
                stdout_line(format!("H_{} = {} turns", h.s, h.turns.map_or("not reached".into(), |t| t.to_string())))?;
            }
            stdout_line(format!("final task accuracy = {:.4}", r.results.final_task_accuracy))?;
        }
        ExperimentOutcome::Counterfactual(rows) => {
            for r in rows {
                stdout_line(format!(
                    "error rate {:.2}: accuracy {:.4} [{:.4}, {:.4}] (n = {})",
                    r.error_rate, r.accuracy, r.ci_low, r.ci_high, r.trials
                ))?;
            }
        }
        ExperimentOutcome::MaxK(r) => {
            stdout_line(format!(
                "max K = {}{}{}",
                r.max_k,
                if r.bound_limited { " (bound-limited)" } else { "" },
                if r.monotonicity_warning { " (warning: non-monotone probes)" } else { "" }
            ))?;
        }
        ExperimentOutcome::FixedOps(rows) => {
            for r in rows {
                stdout_line(format!(
                    "K = {}: final accuracy {:.4}, mean completion tokens {:.1}",
                    r.k, r.final_accuracy, r.avg_completion_tokens
                ))?;
            }
        }
        ExperimentOutcome::ContextWindows(runs) => {
            for (policy, r) in runs {
                stdout_line(format!("{policy}: H = {}", fmt_horizon(r.table.horizon(cfg.horizon_thresholds[0]))))?;
            }
        }
        ExperimentOutcome::Decomposed(runs) => {
            for (variant, r) in runs {
                stdout_line(format!("{variant}: H = {}", fmt_horizon(r.table.horizon(cfg.horizon_thresholds[0]))))?;
            }
        }
    }
    Ok(Some(outcome))
}

fn theory_cmd(args: &TheoryArgs) -> CliResult {
    if let Some(t) = args.growth {
        stdout_line("t,step_accuracy,horizon")?;
        for g in theory::growth_projection(t) {
            stdout_line(format!("{},{:.12},{:.6}", g.t, g.step_accuracy, g.horizon))?;
        }
        return Ok(());
    }
    if let Some(h) = args.horizon {
        let p = theory::required_step_accuracy(h, args.s)?;
        return stdout_line(format!("required step accuracy: {p:.9}"));
    }
    let p = args
        .p
        .ok_or_else(|| Failure::Config("theory needs --p, --horizon or --growth".into()))?;
    let h = theory::horizon_length(p, args.s)?;
    stdout_line(format!("horizon (steps): {}", h.exact))?;
    stdout_line(format!("horizon (continuous): {:.2}", h.continuous))?;
    stdout_line(format!("sensitivity dH/dp: {:.1}", theory::sensitivity(p, args.s)?))?;
    if let Some(n) = args.monte_carlo {
        let turns = (h.exact as usize).saturating_mul(2).max(1);
        let curve = theory::monte_carlo_task_accuracy(p, turns, n, args.seed)?;
        let drop = curve.iter().position(|&a| a < args.s).map(|i| i + 1);
        stdout_line(format!(
            "monte carlo ({n} chains): first step below s = {}",
            drop.map_or("not reached".into(), |t| t.to_string())
        ))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = load(&config)?;
            let plans = experiments::plan_rollouts(&cfg)?;
            let mut buf = Vec::new();
            for p in &plans {
                serde_json::to_writer(&mut buf, p).map_err(|e| Failure::Runtime(e.to_string()))?;
                buf.push(b'\n');
            }
            match out {
                Some(path) => std::fs::write(&path, buf).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display()))),
                None => std::io::stdout()
                    .lock()
                    .write_all(&buf)
                    .map_err(|e| Failure::Runtime(format!("stdout: {e}"))),
            }
        }
        Command::Run { exec, assert_horizon } => {
            let outcome = execute(&exec, &["turns_scaling"])?;
            if let (Some(min), Some(ExperimentOutcome::TurnsScaling(r))) = (assert_horizon, outcome) {
                let h = r.results.horizons.first().and_then(|h| h.turns);
                if h.is_some_and(|t| t < min) {
                    return Err(Failure::Threshold(format!("horizon {} turns is below {min}", h.unwrap())));
                }
            }
            Ok(())
        }
        Command::Counterfactual { exec } => execute(&exec, &["counterfactual"]).map(|_| ()),
        Command::SearchK { exec, assert_max_k } => {
            let outcome = execute(&exec, &["max_k_search"])?;
            if let (Some(min), Some(ExperimentOutcome::MaxK(r))) = (assert_max_k, outcome) {
                if r.max_k < min {
                    return Err(Failure::Threshold(format!("max K {} is below {min}", r.max_k)));
                }
            }
            Ok(())
        }
        Command::Sweep { exec } => {
            execute(&exec, &["fixed_ops_sweep", "context_window_sweep", "decomposed_baselines"]).map(|_| ())
        }
        Command::Theory(args) => theory_cmd(&args),
        Command::Summarize { run, verify } => {
            let dir = RunDir::open(&run)?;
            if verify {
                let changed = dir.verify_manifest()?;
                if !changed.is_empty() {
                    return Err(Failure::Runtime(format!("files differ from the manifest: {}", changed.join(", "))));
                }
            }
            let report = experiments::summarize_run(&dir)?;
            stdout_line(format!(
                "summarized {} rollouts into {}",
                report.results.summarized_rollouts,
                dir.path(store::SUMMARY_FILE).display()
            ))?;
            for h in &report.results.horizons {
                stdout_line(format!("H_{} = {} turns", h.s, h.turns.map_or("not reached".into(), |t| t.to_string())))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
