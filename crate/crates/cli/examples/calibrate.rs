//! Synthetic-task calibration sweep: the four `configs/cipher-*.json` runs
//! over several seeds, printed as a markdown table.
//!
//! `cargo run --release -p lms-fd-cli --example calibrate -- --steps 3000`

use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;
use lms_fd_cli::{run_experiment, RunConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 3000)]
    steps: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Train LMS+FD with the detached one-way KL instead of the symmetric one.
    #[arg(long)]
    one_way_kl: bool,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    lms_rank: Option<usize>,
    #[arg(long, default_value = "configs")]
    configs: PathBuf,
}

fn main() -> lms_fd::Result<()> {
    let args = Args::parse();
    let out = std::env::temp_dir().join("lmsfd-calibration");
    println!("| seed | dense | LMS pair | LMS lang | FD-LS | FD-Share | seconds |");
    println!("|---|---|---|---|---|---|---|");
    for &seed in &args.seeds {
        let t = Instant::now();
        let mut row = Vec::new();
        for v in ["dense", "lms-pair-wise", "lms-language-wise", "lms-fd"] {
            let mut cfg = RunConfig::load(&args.configs.join(format!("cipher-{v}.json")))?;
            cfg.model.seed = seed;
            cfg.train.seed = seed;
            cfg.train.steps = args.steps;
            cfg.model.embed_dim = args.embed_dim.unwrap_or(cfg.model.embed_dim);
            cfg.model.ffn_dim = args.ffn_dim.unwrap_or(cfg.model.ffn_dim);
            cfg.model.lms_rank = args.lms_rank.unwrap_or(cfg.model.lms_rank);
            if args.one_way_kl {
                cfg.train.fd_symmetric = false;
            }
            let s = run_experiment(&cfg, &out.join(format!("{v}-{seed}")))?;
            for route in ["ls", "shared"] {
                if let Some(r) = s.route(route) {
                    row.push(format!("{:.2}", r.mean_accuracy));
                }
            }
        }
        println!("| {seed} | {} | {:.0} |", row.join(" | "), t.elapsed().as_secs_f64());
    }
    Ok(())
}
