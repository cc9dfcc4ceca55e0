use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pads_cli::commands::{self, Task};
use pads_cli::config::{InitChoice, RunConfig};
use pads_cli::CliError;
use pads_core::solvers::InitMode;
use pads_core::{NoiseKind, SamplerKind, SolverKind};

#[derive(Parser)]
#[command(name = "pads", version, about = "Diffusion pose prior: train, solve and evaluate")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training, solver and generator seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: `output_dir` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser and write a checkpoint plus loss log.
    Train,
    /// Run a task on held-out poses and write a report.
    Solve {
        #[arg(long, value_enum)]
        task: Task,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        noise_kind: Option<NoiseKind>,
        #[arg(long)]
        intensity: Option<f64>,
        #[arg(long)]
        mask_group: Option<String>,
        #[arg(long)]
        solver: Option<SolverKind>,
        #[arg(long)]
        sampler: Option<SamplerKind>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        truncation: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        /// Guidance scale; replaces `solver.rho` and every `task.rho` entry.
        #[arg(long)]
        rho: Option<f64>,
        /// How the init enters the chain: direct or diffused.
        #[arg(long)]
        init_mode: Option<InitMode>,
        #[arg(long)]
        init: Option<InitChoice>,
        #[arg(long)]
        depth_scale: Option<f64>,
    },
    /// Compare report summaries.
    Eval {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Write synthetic train and test pose files.
    GenData,
    /// Print the pose-file, checkpoint and report layouts.
    FormatSpec,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.solver.seed = s;
        cfg.data.synthetic.seed = s;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match cli.command {
        Command::Train => {
            cfg.validate()?;
            eprintln!("training {} parameters", commands::parameter_count(&cfg)?);
            let summary = commands::cmd_train(&cfg, &out, |e| {
                eprintln!("epoch {:>4}  loss {:.6}  ({} steps)", e.epoch, e.mean_loss, e.steps)
            })?;
            let last = summary.log.last().map_or(f64::NAN, |e| e.mean_loss);
            println!(
                "checkpoint {}  initial loss {:.6}  final loss {:.6}",
                summary.checkpoint.display(),
                summary.initial_loss,
                last
            );
        }
        Command::Solve {
            task,
            checkpoint,
            noise_kind,
            intensity,
            mask_group,
            solver,
            sampler,
            steps,
            truncation,
            eta,
            rho,
            init_mode,
            init,
            depth_scale,
        } => {
            if let Some(v) = noise_kind {
                cfg.task.noise_kind = v;
            }
            if let Some(v) = intensity {
                cfg.task.intensity = v;
            }
            if let Some(v) = mask_group {
                cfg.task.mask_group = v;
            }
            if let Some(v) = solver {
                cfg.solver.solver = v;
            }
            if let Some(v) = sampler {
                cfg.solver.sampler = v;
            }
            if let Some(v) = eta {
                cfg.solver.eta = v;
            }
            if let Some(v) = init_mode {
                cfg.solver.init_mode = v;
            }
            if let Some(v) = truncation {
                cfg.solver.truncation = v;
            }
            if let Some(v) = steps {
                cfg.solver.n_steps = v;
            }
            if let Some(v) = rho {
                cfg.solver.rho = v;
                cfg.task.rho = Default::default();
            }
            if let Some(v) = init {
                cfg.task.init = Some(v);
            }
            if let Some(v) = depth_scale {
                cfg.task.depth_scale = v;
            }
            cfg.validate()?;
            let ckpt = checkpoint.unwrap_or_else(|| out.join(commands::CHECKPOINT_FILE));
            let report = commands::cmd_solve(&cfg, task, &ckpt, &out)?;
            for (k, v) in report.summary() {
                println!("{k} = {v:.4}");
            }
            println!("report {}", commands::report_path(&out, task, &cfg).display());
        }
        Command::Eval { reports } => {
            let cmp = commands::cmd_eval(&reports, &cfg.eval.metrics)?;
            print!("{}", cmp.to_aligned());
            println!();
            print!("{}", cmp.to_csv());
            if cli.out.is_some() {
                std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(e.to_string()))?;
                std::fs::write(out.join("comparison.csv"), cmp.to_csv())
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
        }
        Command::GenData => {
            cfg.validate()?;
            for p in commands::cmd_gen_data(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::FormatSpec => print!("{}", commands::format_spec()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pads: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
