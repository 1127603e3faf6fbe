use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gfn_teacher::config::{Exploration, RunConfig, Task};
use gfn_teacher::grid::{GridConfig, GridEnv, DEFAULT_ENUMERATION_CAP};
use gfn_teacher::harness::{emit_csv, run_into};
use gfn_teacher::Result;

#[derive(Parser)]
#[command(name = "gfn-teacher", version, about = "Teacher-guided GFlowNet training on hypergrids and diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write one metrics row per evaluation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        /// Exploration strategy, e.g. `teacher` or `prt`.
        #[arg(long)]
        algo: Option<Exploration>,
        /// Grid dimension and side when `--task grid` is given without a config.
        #[arg(long, requires = "side")]
        dim: Option<usize>,
        #[arg(long, requires = "dim")]
        side: Option<usize>,
    },
    /// Print the fully resolved configuration as TOML.
    ShowConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the exact normalized grid target: coordinates, reward, probability, mode flag.
    GridTarget {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        side: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: Option<PathBuf>, task: Option<Task>, dims: Option<(usize, usize)>) -> Result<RunConfig> {
    let mut cfg = match (&config, task) {
        (Some(path), _) => RunConfig::from_path(path)?,
        (None, Some(Task::Grid)) => {
            let (d, h) = dims.unwrap_or((2, 128));
            RunConfig::grid(d, h, Exploration::OnPolicy, 0)
        }
        (None, Some(t)) => RunConfig::diffusion(t, Exploration::OnPolicy, 0),
        (None, None) => {
            return Err(gfn_teacher::Error::InvalidConfig("give --config or --task".into()));
        }
    };
    if let Some(t) = task {
        if t != cfg.task {
            cfg.grid = match t {
                Task::Grid => Some(cfg.grid.take().unwrap_or_else(|| GridConfig::new(2, 128))),
                _ => None,
            };
            cfg.task = t;
        }
    }
    if let Some((d, h)) = dims {
        cfg.grid = Some(GridConfig::new(d, h));
    }
    Ok(cfg)
}

fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            task,
            algo,
            dim,
            side,
        } => {
            let mut cfg = load(config, task, dim.zip(side))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(a) = algo {
                cfg.exploration = a;
            }
            cfg.validate()?;
            let mut rows = Vec::new();
            let result = run_into(&cfg, &mut rows);
            match &out {
                Some(path) => emit_csv(&rows, path)?,
                None => gfn_teacher::harness::write_metrics_csv(&rows, std::io::stdout().lock())?,
            }
            let summary = result?;
            eprintln!(
                "rounds {} reward calls {} modes {}/{}",
                summary.rounds, summary.reward_calls, summary.modes, summary.total_modes
            );
            Ok(())
        }
        Command::ShowConfig { config } => {
            print!("{}", RunConfig::from_path(&config)?.resolved()?.to_toml_string()?);
            Ok(())
        }
        Command::GridTarget { dim, side, out } => {
            let env = GridEnv::new(GridConfig::new(dim, side))?;
            env.write_target_csv(&out, DEFAULT_ENUMERATION_CAP)
        }
    }
}

fn main() -> ExitCode {
    match run_cli(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
