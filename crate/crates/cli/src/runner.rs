use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use lms_fd::budget::{model_params, ModelParams};
use lms_fd::data::vocab::PAD;
use lms_fd::data::{
    encode_cipher, encode_corpus, fixed_batches, gen_cipher_corpus, load_tsv, CipherTask, EncodedCorpus, Example,
};
use lms_fd::model::{build_model, Transformer};
use lms_fd::training::{evaluate, train, EvalRecord, MetricRecord, RouteEval, Scheme, StepReport};
use lms_fd::{Error, LanguageId, ParamKind, Real, Result};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};

pub const SUMMARY_FORMAT: &str = "lms-fd-summary";
pub const SUMMARY_VERSION: u32 = 1;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusSummary {
    pub total: u64,
    pub by_kind: BTreeMap<ParamKind, u64>,
    pub language_specific_per_side: [u64; 2],
}

/// Result file of a run: final validation accuracy per route and pair, plus
/// the parameter census next to its closed-form prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub version: u32,
    pub strategy: String,
    pub scheme: Scheme,
    pub steps: u64,
    pub seed: u64,
    pub languages: Vec<String>,
    pub vocab_size: usize,
    pub final_step: Option<StepReport>,
    /// Keyed by route (`"ls"`, `"shared"`); pairs keyed `"{src}-{tgt}"` by
    /// language name.
    pub accuracy: BTreeMap<String, RouteEval>,
    pub census: CensusSummary,
    pub budget: ModelParams,
    pub census_matches_budget: bool,
}

impl Summary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read summary {}: {e}", path.display())))?;
        let s: Summary = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if s.format != SUMMARY_FORMAT {
            return Err(Error::Config(format!("{} is not a run summary", path.display())));
        }
        Ok(s)
    }

    pub fn route(&self, name: &str) -> Option<&RouteEval> {
        self.accuracy.get(name)
    }
}

/// Loads and encodes the run's corpus. Without a validation file, the
/// training split doubles as the evaluation set.
pub fn load_corpus(source: &DataSource, seed: u64) -> Result<EncodedCorpus> {
    match source {
        DataSource::Cipher(c) => {
            let task = CipherTask::from_config(c)?;
            let corpus = gen_cipher_corpus(&task, seed)?;
            encode_cipher(&task, &corpus)
        }
        DataSource::Tsv { train, valid } => {
            let tr = load_tsv(train)?;
            let va = match valid {
                Some(v) => load_tsv(v)?,
                None => tr.clone(),
            };
            if tr.is_empty() {
                return Err(Error::Data(format!("{} holds no examples", train.display())));
            }
            let languages: std::collections::BTreeSet<String> = tr
                .iter()
                .chain(&va)
                .flat_map(|e: &Example| [e.src_lang.clone(), e.tgt_lang.clone()])
                .collect();
            encode_corpus(languages.into_iter().collect(), &tr, &va)
        }
    }
}

fn rename_pairs(eval: EvalRecord, corpus: &EncodedCorpus) -> BTreeMap<String, RouteEval> {
    let name = |id: &str| -> String {
        id.parse::<usize>()
            .map(|i| corpus.vocab.language_name(LanguageId(i)).to_string())
            .unwrap_or_else(|_| id.to_string())
    };
    eval.routes
        .into_iter()
        .map(|(route, mut r)| {
            r.pairs = std::mem::take(&mut r.pairs)
                .into_iter()
                .map(|(k, v)| {
                    let (s, t) = k.split_once('-').expect("pair keys are src-tgt");
                    (format!("{}-{}", name(s), name(t)), v)
                })
                .collect();
            (route, r)
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Executes a run and writes metrics, checkpoint, vocabulary and summary to
/// `out_dir`.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<Summary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", out_dir.display())))?;
    let seed = cfg.train.seed;
    let corpus = load_corpus(&cfg.data, seed)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = corpus.vocab.len();
    model_cfg.languages = corpus.vocab.languages().len();
    let mut model: Transformer<Real> = build_model(&model_cfg)?;
    let budget = model_params(&model_cfg)?;

    let metrics = File::create(out_dir.join(METRICS_FILE))
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", out_dir.display())))?;
    let mut metrics = BufWriter::new(metrics);
    let history = train(&mut model, &corpus.train, &corpus.valid, &cfg.train, |rec| {
        serde_json::to_writer(&mut metrics, rec)?;
        metrics.write_all(b"\n")?;
        Ok(())
    })?;

    let eval = match history.evals.last() {
        Some(last) if last.step == cfg.train.steps => last.clone(),
        _ => {
            let batches = fixed_batches(&corpus.valid, cfg.train.eval_batch_size, PAD)?;
            let rec = evaluate(&model, &batches, cfg.train.steps)?;
            serde_json::to_writer(&mut metrics, &MetricRecord::Eval(rec.clone()))?;
            metrics.write_all(b"\n")?;
            rec
        }
    };
    metrics.flush()?;

    model.save(out_dir.join(CHECKPOINT_FILE))?;
    write_json(&out_dir.join(VOCAB_FILE), &corpus.vocab)?;

    let census = model.census();
    let by_kind: BTreeMap<ParamKind, u64> = census.by_kind.iter().map(|(k, &v)| (*k, v as u64)).collect();
    let census = CensusSummary {
        total: census.total as u64,
        language_specific_per_side: [
            census.encoder_kind(ParamKind::LanguageSpecific) as u64,
            census.decoder_kind(ParamKind::LanguageSpecific) as u64,
        ],
        by_kind,
    };
    let summary = Summary {
        format: SUMMARY_FORMAT.to_string(),
        version: SUMMARY_VERSION,
        strategy: model_cfg.ffn_strategy.as_str().to_string(),
        scheme: cfg.train.scheme(),
        steps: cfg.train.steps,
        seed,
        languages: corpus.vocab.languages().to_vec(),
        vocab_size: corpus.vocab.len(),
        final_step: history.steps.last().cloned(),
        accuracy: rename_pairs(eval, &corpus),
        census_matches_budget: census.total == budget.total
            && census.by_kind == budget.by_kind
            && census.language_specific_per_side == budget.language_specific_per_side,
        census,
        budget,
    };
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
