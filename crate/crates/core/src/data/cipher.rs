//! Synthetic substitution-cipher translation corpus.
//!
//! Every language `l` is a permutation `π_l` of a shared latent vocabulary.
//! An example for direction `(i, j)` samples a latent sentence `z` and emits
//! `src = marker_i ++ π_i(z)`, `tgt = π_j(z)`. Translating requires
//! `π_j ∘ π_i⁻¹`, which differs for every direction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::lms::LanguageId;

/// Serializable description of a cipher corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CipherConfig {
    pub languages: usize,
    pub latent_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Training sentences per direction between the hub (language 0) and
    /// language `k + 1`, used for both directions.
    pub train_sizes: Vec<usize>,
    pub valid_per_pair: usize,
    /// Explicit directions; `None` means hub-centric `(0, k)` and `(k, 0)`.
    pub pairs: Option<Vec<(usize, usize, usize)>>,
    pub seed: u64,
}

impl Default for CipherConfig {
    fn default() -> Self {
        Self {
            languages: 4,
            latent_vocab: 48,
            min_len: 4,
            max_len: 10,
            train_sizes: vec![1200, 400, 120],
            valid_per_pair: 64,
            pairs: None,
            seed: 17,
        }
    }
}

/// Concrete task: permutations, markers and the direction inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct CipherTask {
    pub latent_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// `permutations[l][z]` is the surface token of latent `z` in language `l`.
    pub permutations: Vec<Vec<u32>>,
    /// `(src, tgt, train sentences)`.
    pub pairs: Vec<(LanguageId, LanguageId, usize)>,
    pub valid_per_pair: usize,
}

/// Example in cipher token space: words are `0..V₀`, the marker of language
/// `l` is `V₀ + l`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherExample {
    pub src_lang: LanguageId,
    pub tgt_lang: LanguageId,
    pub latent: Vec<u32>,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CipherCorpus {
    pub train: Vec<CipherExample>,
    pub valid: Vec<CipherExample>,
}

pub fn language_name(l: LanguageId) -> String {
    format!("l{}", l.0)
}

impl CipherTask {
    /// Draws `languages` pairwise-distinct permutations from `cfg.seed`.
    pub fn from_config(cfg: &CipherConfig) -> Result<Self> {
        if cfg.latent_vocab < 2 {
            return Err(Error::config(format!(
                "latent vocabulary must have at least 2 symbols, got {}",
                cfg.latent_vocab
            )));
        }
        if cfg.languages == 0 {
            return Err(Error::config("cipher task needs at least one language"));
        }
        if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
            return Err(Error::config(format!(
                "bad sentence length range {}..={}",
                cfg.min_len, cfg.max_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut perms: Vec<Vec<u32>> = Vec::with_capacity(cfg.languages);
        let mut attempts = 0;
        while perms.len() < cfg.languages {
            let mut p: Vec<u32> = (0..cfg.latent_vocab as u32).collect();
            p.shuffle(&mut rng);
            if !perms.contains(&p) {
                perms.push(p);
            }
            attempts += 1;
            if attempts > 1000 * cfg.languages {
                return Err(Error::config(
                    "cannot draw enough distinct permutations for this latent vocabulary",
                ));
            }
        }
        let pairs = match &cfg.pairs {
            Some(list) => list
                .iter()
                .map(|&(s, t, n)| (LanguageId(s), LanguageId(t), n))
                .collect(),
            None => {
                if cfg.train_sizes.len() + 1 != cfg.languages {
                    return Err(Error::config(format!(
                        "hub-centric task with {} languages needs {} train sizes, got {}",
                        cfg.languages,
                        cfg.languages - 1,
                        cfg.train_sizes.len()
                    )));
                }
                let mut out = Vec::new();
                for (k, &n) in cfg.train_sizes.iter().enumerate() {
                    out.push((LanguageId(0), LanguageId(k + 1), n));
                    out.push((LanguageId(k + 1), LanguageId(0), n));
                }
                out
            }
        };
        Self::new(
            cfg.latent_vocab,
            cfg.min_len,
            cfg.max_len,
            perms,
            pairs,
            cfg.valid_per_pair,
        )
    }

    /// Task with caller-supplied permutations.
    pub fn new(
        latent_vocab: usize,
        min_len: usize,
        max_len: usize,
        permutations: Vec<Vec<u32>>,
        pairs: Vec<(LanguageId, LanguageId, usize)>,
        valid_per_pair: usize,
    ) -> Result<Self> {
        if latent_vocab < 2 {
            return Err(Error::config(format!(
                "latent vocabulary must have at least 2 symbols, got {latent_vocab}"
            )));
        }
        for (l, p) in permutations.iter().enumerate() {
            let mut seen = vec![false; latent_vocab];
            if p.len() != latent_vocab {
                return Err(Error::config(format!("permutation {l} has wrong length")));
            }
            for &v in p {
                let v = v as usize;
                if v >= latent_vocab || seen[v] {
                    return Err(Error::config(format!("permutation {l} is not a bijection")));
                }
                seen[v] = true;
            }
        }
        for &(s, t, _) in &pairs {
            if s.0 >= permutations.len() || t.0 >= permutations.len() {
                return Err(Error::config(format!("pair ({s}, {t}) names an unknown language")));
            }
        }
        Ok(Self {
            latent_vocab,
            min_len,
            max_len,
            permutations,
            pairs,
            valid_per_pair,
        })
    }

    pub fn languages(&self) -> usize {
        self.permutations.len()
    }

    pub fn marker(&self, l: LanguageId) -> u32 {
        (self.latent_vocab + l.0) as u32
    }

    pub fn inverse(&self, l: LanguageId) -> Vec<u32> {
        let p = &self.permutations[l.0];
        let mut inv = vec![0u32; p.len()];
        for (z, &s) in p.iter().enumerate() {
            inv[s as usize] = z as u32;
        }
        inv
    }

    fn sample<R: Rng>(&self, src: LanguageId, tgt: LanguageId, rng: &mut R) -> CipherExample {
        let len = rng.random_range(self.min_len..=self.max_len);
        let latent: Vec<u32> = (0..len)
            .map(|_| rng.random_range(0..self.latent_vocab as u32))
            .collect();
        let ps = &self.permutations[src.0];
        let pt = &self.permutations[tgt.0];
        let mut s = Vec::with_capacity(len + 1);
        s.push(self.marker(src));
        s.extend(latent.iter().map(|&z| ps[z as usize]));
        let t = latent.iter().map(|&z| pt[z as usize]).collect();
        CipherExample {
            src_lang: src,
            tgt_lang: tgt,
            latent,
            src: s,
            tgt: t,
        }
    }

    /// Surface token for a cipher-space id.
    pub fn token_text(&self, id: u32) -> String {
        if (id as usize) < self.latent_vocab {
            format!("w{id}")
        } else {
            format!("<m{}>", id as usize - self.latent_vocab)
        }
    }

    pub fn language_names(&self) -> Vec<String> {
        (0..self.languages()).map(|l| language_name(LanguageId(l))).collect()
    }

    pub fn to_text(&self, ex: &CipherExample) -> Example {
        Example {
            src_lang: language_name(ex.src_lang),
            tgt_lang: language_name(ex.tgt_lang),
            src: ex.src.iter().map(|&t| self.token_text(t)).collect(),
            tgt: ex.tgt.iter().map(|&t| self.token_text(t)).collect(),
        }
    }

    /// Table-lookup translation `π_j ∘ π_i⁻¹` of a marker-prefixed source.
    pub fn oracle_translate(&self, src_lang: LanguageId, tgt_lang: LanguageId, src: &[u32]) -> Vec<u32> {
        let inv = self.inverse(src_lang);
        let pt = &self.permutations[tgt_lang.0];
        src.iter().skip(1).map(|&s| pt[inv[s as usize] as usize]).collect()
    }
}

/// Train/valid splits, deterministic per `seed`. Each direction draws from
/// its own stream, so adding a direction never perturbs the others.
pub fn gen_cipher_corpus(task: &CipherTask, seed: u64) -> Result<CipherCorpus> {
    if task.latent_vocab < 2 {
        return Err(Error::config("latent vocabulary must have at least 2 symbols"));
    }
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for &(s, t, n) in &task.pairs {
        let stream = ((s.0 as u64) << 32) | t.0 as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        train.extend((0..n).map(|_| task.sample(s, t, &mut rng)));
        valid.extend((0..task.valid_per_pair).map(|_| task.sample(s, t, &mut rng)));
    }
    Ok(CipherCorpus { train, valid })
}
