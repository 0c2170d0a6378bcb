use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use rise_core::pipeline::{AblationAxis, Run, RunConfig, Stage};

/// World-model self-improvement experiments on synthetic manipulation tasks.
#[derive(Parser)]
#[command(name = "rise", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to $RISE_RUN_ROOT/run-<config hash>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Validate the config and print the plan without touching anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate offline datasets for every configured task.
    GenData(Common),
    /// Train the dynamics model.
    TrainDynamics(Common),
    /// Train the value model.
    TrainValue(Common),
    /// Calibrate advantage bins and warm up the policy offline.
    Warmup(Common),
    /// Run the self-improving loop in imagination.
    Improve(Common),
    /// Evaluate a policy checkpoint in the simulator.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint; defaults to the run's improved policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep one ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// offline-ratio, online-toggles or bins.
        #[arg(long, value_parser = parse_axis)]
        axis: AblationAxis,
    },
}

fn parse_axis(s: &str) -> std::result::Result<AblationAxis, String> {
    s.parse().map_err(|e: rise_core::Error| e.to_string())
}

fn open_run(common: &Common) -> Result<Run> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    Ok(Run::new(config, common.out.as_deref())?)
}

fn dry_run(run: &Run, stage: Stage) {
    println!("config ok (hash {})", run.hash);
    println!("run directory: {}", run.dir.display());
    match run.check_prerequisites(stage) {
        Ok(()) => println!("prerequisites for `{}`: present", stage.command()),
        Err(e) => println!("prerequisites for `{}`: {e}", stage.command()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let (common, stage) = match &cli.command {
        Command::GenData(c) => (c, Stage::GenData),
        Command::TrainDynamics(c) => (c, Stage::TrainDynamics),
        Command::TrainValue(c) => (c, Stage::TrainValue),
        Command::Warmup(c) => (c, Stage::Warmup),
        Command::Improve(c) => (c, Stage::Improve),
        Command::Eval { common, .. } => (common, Stage::Eval),
        Command::Ablate { common, .. } => (common, Stage::Ablate),
    };
    let run = open_run(common)?;
    if common.dry_run {
        dry_run(&run, stage);
        return Ok(());
    }
    let force = common.force;
    let out = match &cli.command {
        Command::GenData(_) => run.gen_data(force)?,
        Command::TrainDynamics(_) => run.train_dynamics(force)?,
        Command::TrainValue(_) => run.train_value(force)?,
        Command::Warmup(_) => run.warmup(force)?,
        Command::Improve(_) => run.improve(force)?,
        Command::Eval { checkpoint, .. } => {
            let (out, report) = run.eval(checkpoint.as_deref(), force)?;
            for t in &report.tasks {
                let bins: Vec<String> = t.per_bin.iter().map(|b| format!("bin {}: {:.3}", b.bin, b.success_rate)).collect();
                println!("{}: {}", t.task, bins.join(", "));
            }
            out
        }
        Command::Ablate { axis, .. } => run.ablate(*axis, force)?,
    };
    println!("{}: {}", out.stage.command(), out.summary);
    for a in &out.artifacts {
        println!("  wrote {}", a.display());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use rise_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::UnknownTask(_) | E::RejectedInput(_)) => 2,
        Some(E::Dependency { .. }) => 3,
        Some(E::Numeric { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
