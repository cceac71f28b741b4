use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand};

use swarm_cli::commands;
use swarm_cli::config::{RawConfig, RunConfig};
use swarm_cli::suites::Suite;
use swarm_cli::{exit_code, EXIT_ARGUMENT, EXIT_CHECK, EXIT_OK};
use swarm_core::score::Family;
use swarm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "swarm", version, about = "Sparse-view CT reconstruction with sinogram and wavelet score priors")]
struct Cli {
    /// Config file with `[section]` headers and `key: value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.n_iterations=50`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root (overrides SWARM_OUT and paths.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overrides SWARM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write phantoms, sinograms and masks for the train and eval splits.
    Simulate,
    /// Train one score model on the simulated corpus.
    Train {
        #[arg(long)]
        model: String,
    },
    /// Reconstruct the held-out sparse-view sinograms.
    Reconstruct {
        /// swarm, srm_only or shd_only.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Tabulate PSNR, SSIM and MSE per view count and method.
    Evaluate {
        /// Fail if PSNR drops as the view count grows.
        #[arg(long)]
        check_monotone: bool,
    },
    /// Run property suites (wavelet, prop31, sampler); all by default.
    Check {
        #[arg(long = "suite")]
        suites: Vec<String>,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let raw = match &cli.config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    let mut flags = cli.overrides.clone();
    if let Some(o) = &cli.out {
        flags.push(format!("paths.out={}", o.display()));
    }
    if let Some(s) = cli.seed {
        flags.push(format!("run.seed={s}"));
    }
    if let Some(t) = cli.threads {
        flags.push(format!("run.threads={t}"));
    }
    if let Command::Evaluate { check_monotone: true } = cli.command {
        flags.push("evaluate.check_monotone=true".into());
    }
    if let Command::Reconstruct { mode: Some(m) } = &cli.command {
        flags.push(format!("recon.mode={m}"));
    }
    RunConfig::resolve(raw, &|k| std::env::var(k).ok(), &flags)
}

fn run(cli: &Cli) -> Result<i32> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Simulate => {
            let entries = commands::simulate(&cfg)?;
            println!("wrote {} files, manifest {}", entries.len(), commands::manifest_path(&cfg).display());
        }
        Command::Train { model } => {
            let family: Family = model
                .parse()
                .map_err(|e: Error| Error::argument(e.to_string()))?;
            let r = commands::train(&cfg, family)?;
            println!(
                "checkpoint {} log {} final loss {:.6e}",
                r.checkpoint.display(),
                r.log.display(),
                r.final_loss
            );
        }
        Command::Reconstruct { .. } => {
            let manifest = commands::reconstruct_corpus(&cfg, cfg.recon.mode)?;
            println!("manifest {}", manifest.display());
        }
        Command::Evaluate { .. } => {
            let r = commands::evaluate(&cfg)?;
            println!("{}", std::fs::read_to_string(&r.table).unwrap_or_default().trim_end());
            for (v, m, i) in &r.missing {
                eprintln!("missing: {} at {v} views, item {i}", m.name());
            }
            for v in &r.violations {
                eprintln!("not monotone: {v}");
            }
            if !r.ok() {
                return Ok(EXIT_CHECK);
            }
        }
        Command::Check { suites } => {
            let list: Vec<Suite> = if suites.is_empty() {
                Suite::ALL.to_vec()
            } else {
                suites.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            let mut ok = true;
            for r in commands::check(&list, cfg.seed)? {
                println!("{r}");
                ok &= r.passed;
            }
            if !ok {
                return Ok(EXIT_CHECK);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ARGUMENT } else { EXIT_OK };
            let _ = e.print();
            process::exit(code);
        }
    };
    let code = match run(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    process::exit(code);
}
