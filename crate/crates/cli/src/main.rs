use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use martinlab_cli::{
    run_experiment, thread_cap, write_outcome, CliError, CliResult, ExperimentKind, LoadedConfig, ParabolicMode,
    RunOptions, Task,
};

#[derive(Parser)]
#[command(name = "martinlab", version, about = "Green functions and boundary diagnostics for random walks on free products")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write an SVG plot.
    #[arg(long)]
    svg: bool,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Record real wall times (outputs are then not byte-reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Kernel,
    Lambda,
    Degenerate,
    Llt,
}

#[derive(Subcommand)]
enum AnconaCommand {
    /// Scan and write the rows to a single CSV file.
    Scan {
        /// Experiment configuration (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Output CSV file; the report and plot are written next to it
        #[arg(long)]
        out: PathBuf,
        /// Also write an SVG plot
        #[arg(long)]
        svg: bool,
        /// Overrides the seed from the config
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum Command {
    /// Green function brackets.
    Green(Common),
    /// Green functions avoiding balls of growing radius.
    Restricted(Common),
    /// Spectral radius brackets.
    Radius(Common),
    /// Floyd distances, axioms and visibility.
    Floyd(Common),
    /// Ancona ratio and defect scans.
    #[command(args_conflicts_with_subcommands = true)]
    Ancona {
        #[command(subcommand)]
        scan: Option<AnconaCommand>,
        /// Experiment configuration (TOML)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write an SVG plot
        #[arg(long)]
        svg: bool,
        /// Overrides the seed from the config
        #[arg(long)]
        seed: Option<u64>,
        /// Record real wall times (outputs are then not byte-reproducible)
        #[arg(long)]
        timings: bool,
    },
    /// First-return kernels and their spectral data.
    Parabolic {
        #[arg(value_enum)]
        mode: Option<Mode>,
        #[command(flatten)]
        common: Common,
    },
    /// Spectral degenerescence verdicts.
    Degenerate(Common),
    /// Local limit exponents of first-return kernels.
    Llt(Common),
    /// The identity d/dr (r G_r) = sum G_r G_r.
    Derivative(Common),
    /// Sums of G_r(e, x) G_r(x, e) over spheres.
    Spheres(Common),
}

fn run_common(task: Task, c: &Common) -> CliResult<()> {
    let cfg = LoadedConfig::from_path(&c.config)?;
    let outcome = run_experiment(&cfg, task, &RunOptions { seed: c.seed, timings: c.timings })?;
    let written = write_outcome(&outcome, &c.out.join(format!("{}.csv", task.stem())), c.svg)?;
    finish(&outcome, &written)
}

fn finish(outcome: &martinlab_cli::Outcome, written: &martinlab_cli::Written) -> CliResult<()> {
    println!("{}", written.csv.display());
    if let Some(check) = outcome.report.fatal_failure() {
        return Err(CliError::Check(format!("{}: {}", check.name, check.detail)));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_cap()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Green(c) => run_common(Task::new(ExperimentKind::Green), &c),
        Command::Restricted(c) => run_common(Task::new(ExperimentKind::Restricted), &c),
        Command::Radius(c) => run_common(Task::new(ExperimentKind::SpectralRadius), &c),
        Command::Floyd(c) => run_common(Task::new(ExperimentKind::Floyd), &c),
        Command::Degenerate(c) => run_common(Task::new(ExperimentKind::Degenerate), &c),
        Command::Llt(c) => run_common(Task::new(ExperimentKind::Llt), &c),
        Command::Derivative(c) => run_common(Task::new(ExperimentKind::Derivative), &c),
        Command::Spheres(c) => run_common(Task::new(ExperimentKind::SphereSum), &c),
        Command::Parabolic { mode, common } => {
            let mode = match mode.unwrap_or(Mode::Lambda) {
                Mode::Kernel => ParabolicMode::Kernel,
                Mode::Lambda => ParabolicMode::Lambda,
                Mode::Degenerate => ParabolicMode::Degenerate,
                Mode::Llt => ParabolicMode::Llt,
            };
            run_common(Task::parabolic(mode), &common)
        }
        Command::Ancona { scan: Some(AnconaCommand::Scan { config, out, svg, seed }), .. } => {
            let cfg = LoadedConfig::from_path(&config)?;
            let task = Task::new(ExperimentKind::Ancona);
            let outcome = run_experiment(&cfg, task, &RunOptions { seed, timings: false })?;
            let written = write_outcome(&outcome, &out, svg)?;
            finish(&outcome, &written)
        }
        Command::Ancona { scan: None, config: Some(config), out, svg, seed, timings } => {
            run_common(Task::new(ExperimentKind::Ancona), &Common { config, out, svg, seed, timings })
        }
        Command::Ancona { scan: None, config: None, .. } => {
            Err(CliError::Config("ancona needs --config or the scan subcommand".into()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("martinlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
