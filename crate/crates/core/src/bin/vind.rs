use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vind::io::{load_config, run_experiment, synth, RunConfig};
use vind::Result;

/// Variational inference with coupled finite-difference gradients.
#[derive(Parser)]
#[command(name = "vind", disable_version_flag = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and print it with every default filled in.
    Validate { config: PathBuf },
    /// Write the dataset a config describes to `<out>/data.csv`.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the version.
    Version,
}

fn load(path: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, seed, out } => {
            let cfg = load(&config, seed, out)?;
            let outcome = run_experiment(&cfg)?;
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Validate { config } => {
            let cfg = load(&config, None, None)?;
            print!("{}", vind::io::emit_config(&cfg));
        }
        Command::Synth { spec, seed, out } => {
            let cfg = load(&spec, seed, out)?;
            println!("wrote {}", synth(&cfg)?.display());
        }
        Command::Version => println!("vind {}", env!("CARGO_PKG_VERSION")),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
