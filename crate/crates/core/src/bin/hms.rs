use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use helmholtz_msfem::problems::{describe, run_sweep, spectrum, verify_reference, write_csv, write_spectrum_csv, RunConfig};
use helmholtz_msfem::{Error, Result};

#[derive(Parser)]
#[command(name = "hms", version, about = "Multiscale edge-basis solver for 2D Helmholtz problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an m-sweep and write `<out>/<problem>.csv`.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare fine solutions at h and h/2.
    Reference {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the singular values of one edge as CSV.
    Spectrum {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        edge: usize,
    },
    /// Mesh, coefficient and mesh-size summary.
    Describe {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = RunConfig::from_path(&config)?;
            let dir = out
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| Error::Config("no output directory (--out or \"out\" in the config)".into()))?;
            let outcome = run_sweep(&cfg)?;
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}.csv", cfg.problem.name));
            write_csv(std::fs::File::create(&path)?, &outcome.reports)?;
            for r in &outcome.reports {
                println!("{:>6} m={} dim={:>5} e_L2={:.3e} e_H={:.3e} {}", r.method, r.m, r.coarse_dim, r.e_l2, r.e_h, r.flags);
            }
            if let Some(check) = outcome.reference {
                println!("reference: {check}");
            }
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Reference { config } => {
            let check = verify_reference(&RunConfig::from_path(&config)?)?;
            println!("{check}");
            Ok(check.pass)
        }
        Command::Spectrum { config, edge } => {
            let basis = spectrum(&RunConfig::from_path(&config)?, edge)?;
            write_spectrum_csv(std::io::stdout().lock(), &basis)?;
            Ok(true)
        }
        Command::Describe { config } => {
            let d = describe(&RunConfig::from_path(&config)?)?;
            println!("{d}");
            if !d.assumption_holds {
                log::warn!("coarse mesh is larger than the resolution bound");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
