use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lms_fd::budget::ShapeParams;
use lms_fd::data::CipherConfig;
use lms_fd::{Error, Result};
use lms_fd_cli::{budget_output, compare, exit_code, gen_data, run_experiment, RunConfig, Summary};

#[derive(Parser)]
#[command(
    name = "lmsfd",
    version,
    about = "Language-specific matrix synthesis and fuse distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-pair accuracy deltas and win ratio of two run summaries.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        /// Route of the baseline summary (default: shared if present, else ls).
        #[arg(long)]
        baseline_route: Option<String>,
        #[arg(long)]
        candidate_route: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Extra parameters and FLOPs of LS, MoE, LMS and LMS+FD projections.
    #[command(arg_required_else_help = true)]
    Budget {
        /// Number of languages L.
        #[arg(short = 'L', long)]
        languages: u64,
        /// Rows of the projection.
        #[arg(short, long)]
        r: u64,
        /// Columns of the projection.
        #[arg(short, long)]
        c: u64,
        /// LMS rank.
        #[arg(short, long)]
        d: u64,
        /// Number of experts.
        #[arg(short = 'E', long, default_value_t = 0)]
        experts: u64,
        /// Layers per side.
        #[arg(short = 'N', long, default_value_t = 1)]
        layers: u64,
        #[arg(long)]
        json: bool,
    },
    /// Write a cipher corpus as train.tsv and valid.tsv.
    GenData {
        /// Cipher task description (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
            let summary = run_experiment(&cfg, &out)?;
            for (route, eval) in &summary.accuracy {
                println!("{route:>6}: mean token accuracy {:.2}%", eval.mean_accuracy);
            }
            println!("outputs written to {}", out.display());
        }
        Command::Compare {
            baseline,
            candidate,
            baseline_route,
            candidate_route,
            json,
        } => {
            let b = Summary::load(&baseline)?;
            let c = Summary::load(&candidate)?;
            let report = compare(&b, &c, baseline_route.as_deref(), candidate_route.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{report}");
            }
        }
        Command::Budget {
            languages,
            r,
            c,
            d,
            experts,
            layers,
            json,
        } => {
            let out = budget_output(&ShapeParams::new(languages, r, c, d, experts, layers))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                println!("{}", out.report);
                println!(
                    "flops ratio rc/(d(r+c)): {} ({})",
                    out.flops_ratio.value, out.flops_ratio.rendered
                );
            }
        }
        Command::GenData { config, out } => {
            let cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    serde_json::from_str::<CipherConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => CipherConfig::default(),
            };
            let (train, valid) = gen_data(&cfg, &out)?;
            println!(
                "wrote {train} training and {valid} validation pairs to {}",
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
