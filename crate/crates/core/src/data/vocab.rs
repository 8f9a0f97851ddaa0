use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{EncodedExample, Example};
use crate::error::{Error, Result};
use crate::lms::LanguageId;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Id of the first target-language tag; tag of language `l` is `FIRST_TAG + l`.
pub const FIRST_TAG: u32 = 4;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Id of the tag announcing target language `l`.
pub fn tag_id(l: LanguageId) -> u32 {
    FIRST_TAG + l.0 as u32
}

/// Token inventory. Layout: specials, one tag per language, then corpus
/// tokens in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    languages: Vec<String>,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary whose language order is `languages` and whose word
    /// inventory covers every token of `examples`.
    pub fn build(languages: Vec<String>, examples: &[Example]) -> Result<Self> {
        if languages.is_empty() {
            return Err(Error::config("vocabulary needs at least one language"));
        }
        let known: BTreeSet<&str> = languages.iter().map(String::as_str).collect();
        if known.len() != languages.len() {
            return Err(Error::config("duplicate language names"));
        }
        let mut words = BTreeSet::new();
        for ex in examples {
            for lang in [&ex.src_lang, &ex.tgt_lang] {
                if !known.contains(lang.as_str()) {
                    return Err(Error::Lookup {
                        kind: "language",
                        name: lang.clone(),
                    });
                }
            }
            words.extend(ex.src.iter().chain(&ex.tgt).map(String::as_str));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(languages.iter().map(|l| format!("<2{l}>")));
        tokens.extend(words.into_iter().map(str::to_string));
        Ok(Self::from_parts(languages, tokens))
    }

    /// Languages sorted by name, as found in `examples`.
    pub fn build_sorted(examples: &[Example]) -> Result<Self> {
        let langs: BTreeSet<&String> = examples.iter().flat_map(|e| [&e.src_lang, &e.tgt_lang]).collect();
        Self::build(langs.into_iter().cloned().collect(), examples)
    }

    fn from_parts(languages: Vec<String>, tokens: Vec<String>) -> Self {
        let mut v = Self {
            languages,
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn language_id(&self, name: &str) -> Result<LanguageId> {
        self.languages
            .iter()
            .position(|l| l == name)
            .map(LanguageId)
            .ok_or_else(|| Error::Lookup {
                kind: "language",
                name: name.to_string(),
            })
    }

    pub fn language_name(&self, l: LanguageId) -> &str {
        &self.languages[l.0]
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_example(&self, ex: &Example) -> Result<EncodedExample> {
        Ok(EncodedExample {
            src_lang: self.language_id(&ex.src_lang)?,
            tgt_lang: self.language_id(&ex.tgt_lang)?,
            src: self.encode(&ex.src),
            tgt: self.encode(&ex.tgt),
        })
    }

    pub fn encode_all(&self, examples: &[Example]) -> Result<Vec<EncodedExample>> {
        examples.iter().map(|e| self.encode_example(e)).collect()
    }
}
