use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dap_core::cli::commands::{BC_CHECKPOINT, SACBC_CHECKPOINT};
use dap_core::cli::{
    cmd_eval, cmd_posttune, cmd_tok_bench, cmd_train_bc, cmd_train_sacbc, gen_data, EvalMode,
    RunConfig,
};
use dap_core::{DapError, Result};

#[derive(Parser)]
#[command(
    name = "dap",
    version,
    about = "Discrete-token autoregressive driving planner"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Open,
    Closed,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and held-out episodes.
    GenData,
    /// Stage-I supervised training.
    TrainBc {
        /// Continue from a stage-I checkpoint with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage-II offline SAC-BC fine-tuning.
    TrainSacbc {
        /// Stage-I checkpoint; defaults to bc.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Open- or closed-loop evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Also score post-tuned trajectories.
        #[arg(long)]
        posttune: bool,
    },
    /// Codec reconstruction benchmark over the dataset's scenes.
    TokBench,
    /// Post-tune an x,y,yaw trajectory file against a scene's lane.
    Posttune {
        #[arg(long)]
        input: PathBuf,
        /// Seed of the scene supplying the lane geometry.
        #[arg(long)]
        scene_seed: u64,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(DapError::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| DapError::Internal(e.to_string()))?;
    }
    let out = cfg.out_dir.clone();
    let written = match cli.command {
        Command::GenData => gen_data(&cfg, &out)?,
        Command::TrainBc { resume } => cmd_train_bc(&cfg, &out, resume.as_deref())?,
        Command::TrainSacbc { checkpoint } => {
            let ck = checkpoint.unwrap_or_else(|| out.join(BC_CHECKPOINT));
            cmd_train_sacbc(&cfg, &out, &ck)?
        }
        Command::Eval {
            checkpoint,
            mode,
            posttune,
        } => {
            let ck = checkpoint.unwrap_or_else(|| {
                let s = out.join(SACBC_CHECKPOINT);
                if s.exists() {
                    s
                } else {
                    out.join(BC_CHECKPOINT)
                }
            });
            let mode = match mode {
                Mode::Open => EvalMode::Open,
                Mode::Closed => EvalMode::Closed,
            };
            cmd_eval(&cfg, &out, &ck, mode, posttune)?
        }
        Command::TokBench => cmd_tok_bench(&cfg, &out)?,
        Command::Posttune { input, scene_seed } => cmd_posttune(&cfg, &out, &input, scene_seed)?,
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    };
    println!("config_hash {}", cfg.config_hash());
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
