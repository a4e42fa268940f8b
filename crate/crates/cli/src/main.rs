use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memsinks::theory::Suite;
use memsinks_cli::*;

const SECTIONS: [&str; 7] = ["corpus.", "model.", "mask.", "train.", "localize.", "sweep.", "theory."];

#[derive(Parser)]
#[command(
    name = "memsinks",
    about = "Sequence-tied memorization sinks: corpus generation, training, localization and theory checks",
    after_help = "Any config key can be overridden with --section.key=value, e.g. --train.mode=memsinks."
)]
struct Cli {
    /// Flat key = value config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (same as --out.dir=...).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write stream shards, validation stream and manifest.
    GenCorpus,
    /// Train one run; writes metrics and a checkpoint.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on validation and repeated documents.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forgetting/degradation tradeoff of score-based neuron dropping.
    Localize {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One run per value of sweep.axis, aggregated into a CSV.
    Sweep,
    /// Run theory simulations and check their bounds.
    Theory {
        /// coadaptation, forgetting, sinks, softmax or entanglement.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long)]
        seeds: Option<u64>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
}

/// Splits `--section.key=value` overrides from the arguments clap handles.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--") {
            Some(body) if SECTIONS.iter().any(|s| body.starts_with(s)) || body.starts_with("out.") => {
                let (k, v) = body
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("override {a} needs the form --key=value")))?;
                overrides.push((k.to_string(), v.to_string()));
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn run() -> Result<(), CliError> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::try_parse_from(args).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            print!("{e}");
            std::process::exit(0);
        }
        CliError::Usage(e.to_string())
    })?;
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    for (k, v) in &overrides {
        cfg.set(k, v)?;
    }
    match cli.command {
        Command::GenCorpus => {
            let m = cmd_gen_corpus(&cfg)?;
            println!(
                "wrote {} shard(s), {} occurrences, {} tokens to {}",
                m.shards.len(),
                m.occurrences,
                m.tokens,
                cfg.out_dir.display()
            );
        }
        Command::Train { resume } => {
            let s = cmd_train(&cfg, resume)?;
            println!("trained {} steps ({} tokens)", s.steps, s.tokens_trained);
            if let Some(r) = &s.last {
                println!("{}", r.to_json());
            }
        }
        Command::Eval { checkpoint } => {
            let r = cmd_eval(&cfg, &checkpoint)?;
            println!("{}", serde_json::to_string(&r).expect("report serializes"));
        }
        Command::Localize { checkpoint } => {
            let pts = cmd_localize(&cfg, &checkpoint)?;
            println!("{}", memsinks::localize::TRADEOFF_CSV_HEADER);
            let name = cfg.localize.method.as_str();
            for p in pts {
                println!("{}", p.to_csv(name));
            }
        }
        Command::Sweep => {
            let rows = cmd_sweep(&cfg)?;
            println!("{} runs written under {}", rows.len(), cfg.out_dir.display());
        }
        Command::Theory { suite, seeds, json } => {
            if let Some(n) = seeds {
                cfg.theory_seeds = n;
            }
            let suite = match suite.as_deref() {
                None | Some("all") => None,
                Some(s) => Some(Suite::parse(s).ok_or_else(|| CliError::Usage(format!("unknown suite {s}")))?),
            };
            let outcome = cmd_theory(&cfg, suite)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&outcome).expect("rows serialize"));
            } else {
                print!("{}", theory_table(&outcome.rows));
                println!("{} checks, {} violations", outcome.rows.len(), outcome.violations);
            }
            write_theory(&cfg, &outcome)?;
            if outcome.violations > 0 {
                return Err(CliError::Invariant(format!("{} bound violations", outcome.violations)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
