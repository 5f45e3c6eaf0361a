use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tll_lab::{error_exit_code, exit_code, parse_config, run_with_pool, ExperimentConfig};

#[derive(Parser)]
#[command(name = "tll-lab", version, about = "Dipolar XY chain simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a config file.
    Run(Overrides),
    /// Parse and validate a config file without running it.
    Validate(Overrides),
}

#[derive(Args)]
struct Overrides {
    config: PathBuf,
    /// Master seed; replaces `seed` from the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); replaces `workers` from the file.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; replaces `output_dir` from the file.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig, ExitCode> {
        let mut cfg = parse_config(&self.config).map_err(|e| {
            eprintln!("{}: {e}", self.config.display());
            ExitCode::from(1)
        })?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate(o) => match o.load() {
            Ok(cfg) => {
                eprintln!(
                    "{}: valid {} config ({} spins, output {})",
                    o.config.display(),
                    cfg.scenario.name(),
                    cfg.geometry.n_active(),
                    cfg.output_dir.display()
                );
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run(o) => {
            let cfg = match o.load() {
                Ok(c) => c,
                Err(code) => return code,
            };
            match run_with_pool(&cfg) {
                Ok(m) => {
                    for w in &m.warnings {
                        eprintln!("warning: {w}");
                    }
                    ExitCode::from(exit_code(&m) as u8)
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(error_exit_code(&e) as u8)
                }
            }
        }
    }
}
