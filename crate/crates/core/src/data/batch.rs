//! Homogeneous batching: every batch holds one translation direction.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::sampling::temperature_sample;
use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::lms::LanguageId;

/// Right-padded id matrices for a single `(src_lang, tgt_lang)` direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src_lang: LanguageId,
    pub tgt_lang: LanguageId,
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    pub pad: u32,
}

impl Batch {
    /// Pads `examples` into a batch; fails unless they share one direction.
    pub fn from_examples(examples: &[&EncodedExample], pad: u32) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::data("empty batch"))?;
        let pair = first.pair();
        if let Some(bad) = examples.iter().find(|e| e.pair() != pair) {
            return Err(Error::data(format!(
                "batch is not homogeneous: ({}, {}) mixed with ({}, {})",
                pair.0, pair.1, bad.src_lang, bad.tgt_lang
            )));
        }
        let pad_rows = |rows: Vec<&Vec<u32>>| {
            let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
            let lens: Vec<usize> = rows.iter().map(|r| r.len()).collect();
            let padded = rows
                .into_iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.resize(width, pad);
                    r
                })
                .collect();
            (padded, lens)
        };
        let (src, src_lens) = pad_rows(examples.iter().map(|e| &e.src).collect());
        let (tgt, tgt_lens) = pad_rows(examples.iter().map(|e| &e.tgt).collect());
        Ok(Self {
            src_lang: pair.0,
            tgt_lang: pair.1,
            src,
            tgt,
            src_lens,
            tgt_lens,
            pad,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn pair(&self) -> (LanguageId, LanguageId) {
        (self.src_lang, self.tgt_lang)
    }

    /// Number of target tokens, excluding padding.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    /// Reorders sentences: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<u32>>| order.iter().map(|&i| v[i].clone()).collect();
        let pick_len = |v: &Vec<usize>| order.iter().map(|&i| v[i]).collect();
        Self {
            src_lang: self.src_lang,
            tgt_lang: self.tgt_lang,
            src: pick(&self.src),
            tgt: pick(&self.tgt),
            src_lens: pick_len(&self.src_lens),
            tgt_lens: pick_len(&self.tgt_lens),
            pad: self.pad,
        }
    }
}

fn group_by_pair(examples: &[EncodedExample]) -> BTreeMap<(LanguageId, LanguageId), Vec<usize>> {
    let mut groups: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.pair()).or_default().push(i);
    }
    groups
}

/// Endless stream of homogeneous batches. The direction of each batch is drawn
/// from the temperature distribution over direction sizes; within a direction
/// examples are visited in a per-epoch shuffled order.
pub struct BatchStream<'a> {
    examples: &'a [EncodedExample],
    pairs: Vec<(LanguageId, LanguageId)>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    probs: Vec<f64>,
    chooser: WeightedIndex<f64>,
    batch_size: usize,
    pad: u32,
    rng: ChaCha8Rng,
}

pub fn make_batches(
    examples: &[EncodedExample],
    batch_size: usize,
    pad: u32,
    temperature: f64,
    seed: u64,
) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let groups = group_by_pair(examples);
    if groups.is_empty() {
        return Err(Error::data("cannot batch an empty corpus"));
    }
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let probs = temperature_sample(&sizes, temperature)?;
    let chooser = WeightedIndex::new(&probs).map_err(|e| Error::Numeric(format!("sampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pairs, mut orders): (Vec<_>, Vec<_>) = groups.into_iter().unzip();
    for o in &mut orders {
        o.shuffle(&mut rng);
    }
    let cursors = vec![0; pairs.len()];
    Ok(BatchStream {
        examples,
        pairs,
        orders,
        cursors,
        probs,
        chooser,
        batch_size,
        pad,
        rng,
    })
}

impl BatchStream<'_> {
    pub fn pairs(&self) -> &[(LanguageId, LanguageId)] {
        &self.pairs
    }

    /// Probability of drawing each entry of [`Self::pairs`].
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let k = self.chooser.sample(&mut self.rng);
        let n = self.orders[k].len().min(self.batch_size);
        let mut picked = Vec::with_capacity(n);
        while picked.len() < n {
            if self.cursors[k] == self.orders[k].len() {
                self.orders[k].shuffle(&mut self.rng);
                self.cursors[k] = 0;
            }
            picked.push(&self.examples[self.orders[k][self.cursors[k]]]);
            self.cursors[k] += 1;
        }
        Some(Batch::from_examples(&picked, self.pad).expect("grouped by direction"))
    }
}

/// Deterministic, unshuffled batches covering every example once, grouped by
/// direction in sorted order. Used for evaluation.
pub fn fixed_batches(examples: &[EncodedExample], batch_size: usize, pad: u32) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut out = Vec::new();
    for idx in group_by_pair(examples).values() {
        for chunk in idx.chunks(batch_size) {
            let refs: Vec<&EncodedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            out.push(Batch::from_examples(&refs, pad)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(s: usize, t: usize, len: usize) -> EncodedExample {
        EncodedExample {
            src_lang: LanguageId(s),
            tgt_lang: LanguageId(t),
            src: vec![7; len + 1],
            tgt: vec![9; len],
        }
    }

    #[test]
    fn pads_right() {
        let a = ex(0, 1, 2);
        let b = ex(0, 1, 4);
        let batch = Batch::from_examples(&[&a, &b], 0).unwrap();
        assert_eq!(batch.src[0], vec![7, 7, 7, 0, 0]);
        assert_eq!(batch.tgt_lens, vec![2, 4]);
        assert_eq!(batch.target_tokens(), 6);
    }

    #[test]
    fn mixed_pairs_rejected() {
        let a = ex(0, 1, 2);
        let b = ex(1, 0, 2);
        assert!(matches!(Batch::from_examples(&[&a, &b], 0), Err(Error::Data(_))));
    }

    #[test]
    fn single_pair_corpus() {
        let data: Vec<_> = (0..10).map(|i| ex(2, 3, 1 + i % 4)).collect();
        let stream = make_batches(&data, 4, 0, 5.0, 1).unwrap();
        for b in stream.take(50) {
            assert_eq!(b.pair(), (LanguageId(2), LanguageId(3)));
            assert_eq!(b.len(), 4);
        }
    }

    #[test]
    fn small_pair_batches_shrink() {
        let data = vec![ex(0, 1, 2), ex(0, 1, 3)];
        let b = make_batches(&data, 8, 0, 1.0, 0).unwrap().next().unwrap();
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn fixed_batches_cover_everything_once() {
        let mut data: Vec<_> = (0..7).map(|_| ex(0, 1, 2)).collect();
        data.extend((0..5).map(|_| ex(1, 0, 3)));
        let batches = fixed_batches(&data, 3, 0).unwrap();
        assert_eq!(batches.iter().map(Batch::len).sum::<usize>(), 12);
        assert_eq!(batches.len(), 3 + 2);
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(make_batches(&[ex(0, 1, 1)], 0, 0, 1.0, 0).is_err());
    }
}
