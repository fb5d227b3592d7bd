use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use halfline_weyl::cli::{self, RunConfig, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "halfline-weyl", version, about = "Weyl solutions and spectra of -y'' + q y on the half-line")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Also write SVG plots.
        #[arg(long)]
        plots: bool,
        /// Output directory (overrides `out_dir` of the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.command {
        Command::Validate { config } => match RunConfig::load(&config).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => {
                println!("ok: task {}", c.task.name());
                0
            }
            Err(e) => {
                eprintln!("{e}");
                EXIT_CONFIG
            }
        },
        Command::Run { config, plots, out } => {
            let loaded = cli::init_threads().and_then(|_| RunConfig::load(&config));
            match loaded {
                Err(e) => {
                    eprintln!("{e}");
                    EXIT_CONFIG
                }
                Ok(cfg) => {
                    let dir = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("halfline-out"));
                    match cli::run(&cfg, &dir, plots) {
                        Ok(code) => {
                            if code != 0 {
                                eprintln!("task {} finished with exit code {code}; see {}", cfg.task.name(), dir.join("results.json").display());
                            }
                            code
                        }
                        Err(e) => {
                            eprintln!("{e}");
                            cli::exit_code(&e)
                        }
                    }
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
