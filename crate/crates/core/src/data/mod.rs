//! Corpora, vocabulary and homogeneous batching.

pub mod batch;
pub mod cipher;
pub mod sampling;
pub mod tsv;
pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lms::LanguageId;

pub use batch::{fixed_batches, make_batches, Batch, BatchStream};
pub use cipher::{gen_cipher_corpus, CipherConfig, CipherCorpus, CipherExample, CipherTask};
pub use sampling::temperature_sample;
pub use tsv::{load_tsv, parse_tsv, write_tsv};
pub use vocab::Vocab;

/// One whitespace-tokenized sentence pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

/// Sentence pair mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub src_lang: LanguageId,
    pub tgt_lang: LanguageId,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl EncodedExample {
    pub fn pair(&self) -> (LanguageId, LanguageId) {
        (self.src_lang, self.tgt_lang)
    }
}

/// Vocabulary plus encoded train and validation splits.
#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    pub vocab: Vocab,
    pub train: Vec<EncodedExample>,
    pub valid: Vec<EncodedExample>,
}

/// Encodes text splits with a vocabulary built from the training split;
/// validation tokens unseen in training map to UNK.
pub fn encode_corpus(languages: Vec<String>, train: &[Example], valid: &[Example]) -> Result<EncodedCorpus> {
    let vocab = Vocab::build(languages, train)?;
    Ok(EncodedCorpus {
        train: vocab.encode_all(train)?,
        valid: vocab.encode_all(valid)?,
        vocab,
    })
}

/// Encodes a cipher corpus. The vocabulary holds every latent symbol and
/// marker of the task, whether or not it was sampled.
pub fn encode_cipher(task: &CipherTask, corpus: &CipherCorpus) -> Result<EncodedCorpus> {
    let names = task.language_names();
    let symbols = (task.latent_vocab + task.languages()) as u32;
    let inventory = Example {
        src_lang: names[0].clone(),
        tgt_lang: names[0].clone(),
        src: (0..symbols).map(|id| task.token_text(id)).collect(),
        tgt: Vec::new(),
    };
    let vocab = Vocab::build(names, std::slice::from_ref(&inventory))?;
    let text = |xs: &[CipherExample]| -> Vec<Example> { xs.iter().map(|x| task.to_text(x)).collect() };
    Ok(EncodedCorpus {
        train: vocab.encode_all(&text(&corpus.train))?,
        valid: vocab.encode_all(&text(&corpus.valid))?,
        vocab,
    })
}
