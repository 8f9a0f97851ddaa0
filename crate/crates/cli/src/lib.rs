//! Experiment runner, comparison reports and budget tables for `lmsfd`.

pub mod compare;
pub mod config;
pub mod runner;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use lms_fd::budget::{budget_single_projection, flops_ratio, BudgetReport, FlopsRatio, ShapeParams};
use lms_fd::data::{gen_cipher_corpus, write_tsv, CipherConfig, CipherTask, Example};
use lms_fd::{Error, Result};
use serde::{Deserialize, Serialize};

pub use compare::{compare, ComparisonReport};
pub use config::{DataSource, RunConfig};
pub use runner::{run_experiment, Summary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Process exit code for an error: usage and configuration problems give 2,
/// numeric failures during training give 3.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } | Error::Numeric(_) | Error::DegenerateBatch | Error::Shape { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Machine-readable output of the `budget` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetOutput {
    pub report: BudgetReport,
    pub full_model_ls_params: u64,
    pub flops_ratio: FlopsRatio,
}

pub fn budget_output(shape: &ShapeParams) -> Result<BudgetOutput> {
    Ok(BudgetOutput {
        report: budget_single_projection(shape)?,
        full_model_ls_params: lms_fd::budget::budget_full_model(shape),
        flops_ratio: flops_ratio(shape.r, shape.c, shape.d)?,
    })
}

/// Writes `train.tsv` and `valid.tsv` for a cipher task into `out_dir`.
pub fn gen_data(cfg: &CipherConfig, out_dir: &Path) -> Result<(usize, usize)> {
    let task = CipherTask::from_config(cfg)?;
    let corpus = gen_cipher_corpus(&task, cfg.seed)?;
    fs::create_dir_all(out_dir)?;
    let text = |xs: &[lms_fd::data::CipherExample]| -> Vec<Example> { xs.iter().map(|x| task.to_text(x)).collect() };
    for (name, split) in [("train.tsv", &corpus.train), ("valid.tsv", &corpus.valid)] {
        write_tsv(BufWriter::new(File::create(out_dir.join(name))?), &text(split))?;
    }
    Ok((corpus.train.len(), corpus.valid.len()))
}
