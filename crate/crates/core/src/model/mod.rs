//! Toy pre-norm encoder-decoder transformer with pluggable FFN strategies.
//!
//! The source sequence is prefixed with the target-language tag; the decoder
//! is teacher-forced with `<s> ++ target` and predicts `target ++ </s>`.
//! Output logits reuse the embedding matrix.

pub mod config;
pub mod layers;
pub mod switch;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{tag_id, BOS, EOS};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::lms::{LanguageId, Route};
use crate::numerics::{Graph, Mat, Var};
use crate::params::{join, Binder, ParamInfo, ParamKind, Parameterized};
use crate::scalar::Scalar;

pub use config::{FfnStrategy, ModelConfig, Placement};
use layers::{init_weight, Blocks, LmsSpec, SideRouting};
pub use layers::{Attention, ExpertFfn, Ffn, FfnOutput, LayerNorm, Projection};
pub use switch::{switch_gate, GateDecision};

pub const CHECKPOINT_FORMAT: &str = "lms-fd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: Ffn<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer<T> {
    pub norm1: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub norm3: LayerNorm<T>,
    pub ffn: Ffn<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transformer<T> {
    config: ModelConfig,
    embedding: Mat<T>,
    encoder: Vec<EncoderLayer<T>>,
    encoder_norm: LayerNorm<T>,
    decoder: Vec<DecoderLayer<T>>,
    decoder_norm: LayerNorm<T>,
}

/// Graph handles produced by [`Transformer::forward`].
pub struct ModelOutput {
    /// Teacher-forced logits, one block of `rows_per_sentence` rows per sentence.
    pub logits: Var,
    /// Targets aligned with the logit rows; padding positions hold the pad id.
    pub targets: Vec<usize>,
    pub rows_per_sentence: usize,
    /// Mean switch balance loss over switch layers, when any exist.
    pub balance_loss: Option<Var>,
}

/// Parameter counts by kind, split by where they live.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub total: usize,
    pub by_kind: BTreeMap<ParamKind, usize>,
    pub encoder: BTreeMap<ParamKind, usize>,
    pub decoder: BTreeMap<ParamKind, usize>,
}

impl ParamCensus {
    pub fn kind(&self, k: ParamKind) -> usize {
        self.by_kind.get(&k).copied().unwrap_or(0)
    }

    pub fn encoder_kind(&self, k: ParamKind) -> usize {
        self.encoder.get(&k).copied().unwrap_or(0)
    }

    pub fn decoder_kind(&self, k: ParamKind) -> usize {
        self.decoder.get(&k).copied().unwrap_or(0)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    format: String,
    version: u32,
    model: Transformer<T>,
}

/// Sinusoidal position table, `len`×`dim`.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Mat<T> {
    let mut pe = Mat::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            pe.set(pos, i, T::lit(v));
        }
    }
    pe
}

pub fn build_model<T: Scalar>(cfg: &ModelConfig) -> Result<Transformer<T>> {
    Transformer::new(cfg.clone())
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let r = config.ffn_dim;
        let seed = config.seed;
        let lms = LmsSpec {
            rank: config.lms_rank,
            languages: config.languages,
            mode: config.lms_mode,
            with_shared: config.ffn_strategy == FfnStrategy::LmsFd,
        };
        let attn_lms = config.lms_in_attention().then_some(lms);
        let ffn_lms = config.lms_in_ffn().then_some(lms);

        let make_ffn = |name: &str, i: usize| -> Result<Ffn<T>> {
            match config.ffn_strategy {
                FfnStrategy::FullRankLs => Ok(Ffn::language_experts(seed, name, c, r, config.languages)),
                FfnStrategy::SwitchTop1 if config.is_switch_layer(i) => {
                    Ok(Ffn::switch(seed, name, c, r, config.n_experts))
                }
                _ => Ffn::projected(seed, name, c, r, ffn_lms),
            }
        };

        let mut encoder = Vec::with_capacity(config.n_layers);
        let mut decoder = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let e = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                norm1: LayerNorm::new(c),
                attn: Attention::new(seed, &join(&e, "attn"), c, attn_lms)?,
                norm2: LayerNorm::new(c),
                ffn: make_ffn(&join(&e, "ffn"), i)?,
            });
            let d = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                norm1: LayerNorm::new(c),
                self_attn: Attention::new(seed, &join(&d, "self_attn"), c, attn_lms)?,
                norm2: LayerNorm::new(c),
                cross_attn: Attention::new(seed, &join(&d, "cross_attn"), c, attn_lms)?,
                norm3: LayerNorm::new(c),
                ffn: make_ffn(&join(&d, "ffn"), i)?,
            });
        }
        Ok(Self {
            embedding: init_weight(seed, "embedding", config.vocab_size, c, 1.0 / (c as f64).sqrt()),
            encoder,
            encoder_norm: LayerNorm::new(c),
            decoder,
            decoder_norm: LayerNorm::new(c),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Mat<T> {
        &self.embedding
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer<T>] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer<T>] {
        &self.decoder
    }

    pub fn encoder_layers_mut(&mut self) -> &mut [EncoderLayer<T>] {
        &mut self.encoder
    }

    pub fn decoder_layers_mut(&mut self) -> &mut [DecoderLayer<T>] {
        &mut self.decoder
    }

    pub fn supports_route(&self, route: Route) -> bool {
        route == Route::Ls || self.config.ffn_strategy.has_shared_route()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let v = self.config.vocab_size;
        match ids.iter().find(|&&id| id >= v) {
            Some(id) => Err(Error::data(format!("token id {id} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    fn embed(&self, g: &mut Graph<T>, b: &mut Binder<T>, ids: &[usize], width: usize) -> Result<Var> {
        let table = b.bind(g, &self.embedding);
        let x = g.gather_rows(table, ids)?;
        let x = g.scale(x, T::lit((self.config.embed_dim as f64).sqrt()));
        let pe = positional_encoding::<T>(width, self.config.embed_dim);
        let sentences = ids.len() / width.max(1);
        let mut tiled = Mat::zeros(ids.len(), self.config.embed_dim);
        for s in 0..sentences {
            for p in 0..width {
                tiled.row_mut(s * width + p).copy_from_slice(pe.row(p));
            }
        }
        let pe = g.constant(tiled);
        g.add(x, pe)
    }

    /// Teacher-forced forward pass over a homogeneous batch.
    pub fn forward(&self, g: &mut Graph<T>, b: &mut Binder<T>, batch: &Batch, route: Route) -> Result<ModelOutput> {
        if !self.supports_route(route) {
            return Err(Error::config(format!(
                "strategy {} has no shared route",
                self.config.ffn_strategy.as_str()
            )));
        }
        let (src_lang, tgt_lang) = batch.pair();
        for l in [src_lang, tgt_lang] {
            if l.0 >= self.config.languages {
                return Err(Error::Lookup {
                    kind: "language",
                    name: l.to_string(),
                });
            }
        }
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let pad = batch.pad as usize;
        let n = batch.len();

        // Encoder input: target tag ++ source.
        let src_width = batch.src.first().map_or(0, Vec::len) + 1;
        let mut enc_ids = Vec::with_capacity(n * src_width);
        for row in &batch.src {
            enc_ids.push(tag_id(tgt_lang) as usize);
            enc_ids.extend(row.iter().map(|&t| t as usize));
        }
        let enc_blocks = Blocks {
            width: src_width,
            lens: batch.src_lens.iter().map(|l| l + 1).collect(),
        };

        // Decoder input <s> ++ target, prediction target ++ </s>.
        let tgt_width = batch.tgt.first().map_or(0, Vec::len) + 1;
        let mut dec_ids = Vec::with_capacity(n * tgt_width);
        let mut targets = Vec::with_capacity(n * tgt_width);
        for (row, &len) in batch.tgt.iter().zip(&batch.tgt_lens) {
            dec_ids.push(BOS as usize);
            dec_ids.extend(row.iter().map(|&t| t as usize));
            targets.extend(row[..len].iter().map(|&t| t as usize));
            targets.push(EOS as usize);
            targets.extend(std::iter::repeat_n(pad, tgt_width - len - 1));
        }
        let dec_blocks = Blocks {
            width: tgt_width,
            lens: batch.tgt_lens.iter().map(|l| l + 1).collect(),
        };
        self.check_ids(&enc_ids)?;
        self.check_ids(&dec_ids)?;
        self.check_ids(&targets)?;

        let enc_routing = SideRouting {
            src: src_lang,
            tgt: tgt_lang,
            side: src_lang,
            route,
        };
        let dec_routing = SideRouting {
            side: tgt_lang,
            ..enc_routing
        };
        let heads = self.config.n_heads;
        let mut balance = Vec::new();

        let mut x = self.embed(g, b, &enc_ids, src_width)?;
        for layer in &self.encoder {
            let h = layer.norm1.forward(g, b, x)?;
            let h = layer
                .attn
                .forward(g, b, h, &enc_blocks, h, &enc_blocks, heads, false, &enc_routing)?;
            x = g.add(x, h)?;
            let h = layer.norm2.forward(g, b, x)?;
            let out = layer.ffn.forward(g, b, h, &enc_routing)?;
            balance.extend(out.balance_loss);
            x = g.add(x, out.value)?;
        }
        let memory = self.encoder_norm.forward(g, b, x)?;

        let mut y = self.embed(g, b, &dec_ids, tgt_width)?;
        for layer in &self.decoder {
            let h = layer.norm1.forward(g, b, y)?;
            let h = layer
                .self_attn
                .forward(g, b, h, &dec_blocks, h, &dec_blocks, heads, true, &dec_routing)?;
            y = g.add(y, h)?;
            let h = layer.norm2.forward(g, b, y)?;
            let h = layer
                .cross_attn
                .forward(g, b, h, &dec_blocks, memory, &enc_blocks, heads, false, &dec_routing)?;
            y = g.add(y, h)?;
            let h = layer.norm3.forward(g, b, y)?;
            let out = layer.ffn.forward(g, b, h, &dec_routing)?;
            balance.extend(out.balance_loss);
            y = g.add(y, out.value)?;
        }
        let y = self.decoder_norm.forward(g, b, y)?;
        let table = b.bind(g, &self.embedding);
        let logits = g.matmul_nt(y, table)?;

        let balance_loss = match balance.len() {
            0 => None,
            k => {
                let mut acc = balance[0];
                for &v in &balance[1..] {
                    acc = g.add(acc, v)?;
                }
                Some(g.scale(acc, T::lit(1.0 / k as f64)))
            }
        };
        Ok(ModelOutput {
            logits,
            targets,
            rows_per_sentence: tgt_width,
            balance_loss,
        })
    }

    /// Logits as a plain matrix (no gradient bookkeeping kept).
    pub fn logits(&self, batch: &Batch, route: Route) -> Result<Mat<T>> {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let out = self.forward(&mut g, &mut b, batch, route)?;
        Ok(g.value(out.logits).clone())
    }

    /// `(correct, total)` teacher-forced argmax predictions over non-pad targets.
    pub fn token_accuracy(&self, batch: &Batch, route: Route) -> Result<(usize, usize)> {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let out = self.forward(&mut g, &mut b, batch, route)?;
        let logits = g.value(out.logits);
        let pad = batch.pad as usize;
        let mut correct = 0;
        let mut total = 0;
        for (i, &t) in out.targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            total += 1;
            if logits.argmax_row(i) == t {
                correct += 1;
            }
        }
        Ok((correct, total))
    }

    /// Greedy decoding for one source sentence (without tag), up to `max_len` tokens.
    pub fn greedy_decode(
        &self,
        src_lang: LanguageId,
        tgt_lang: LanguageId,
        src: &[u32],
        max_len: usize,
        route: Route,
        pad: u32,
    ) -> Result<Vec<u32>> {
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_len {
            let batch = Batch {
                src_lang,
                tgt_lang,
                src: vec![src.to_vec()],
                tgt: vec![out.clone()],
                src_lens: vec![src.len()],
                tgt_lens: vec![out.len()],
                pad,
            };
            let logits = self.logits(&batch, route)?;
            let next = logits.argmax_row(out.len()) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    pub fn census(&self) -> ParamCensus {
        let mut c = ParamCensus::default();
        self.visit_params("", &mut |info, m| {
            let n = m.len();
            c.total += n;
            *c.by_kind.entry(info.kind).or_default() += n;
            if info.name.starts_with("encoder.") {
                *c.encoder.entry(info.kind).or_default() += n;
            } else if info.name.starts_with("decoder.") {
                *c.decoder.entry(info.kind).or_default() += n;
            }
        });
        c
    }

    pub fn to_json(&self) -> Result<String>
    where
        T: Serialize,
    {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self>
    where
        T: for<'de> Deserialize<'de>,
    {
        let ck: Checkpoint<T> = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!("not a checkpoint: format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        // The stored tensors must have exactly the layout the config implies.
        let reference = Transformer::<T>::new(ck.model.config.clone())?;
        let mut expected = Vec::new();
        reference.visit_params("", &mut |i, m| expected.push((i.name.clone(), m.shape())));
        let mut found = Vec::new();
        ck.model
            .visit_params("", &mut |i, m| found.push((i.name.clone(), m.shape())));
        if expected != found {
            return Err(Error::data("checkpoint tensors do not match its configuration"));
        }
        Ok(ck.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()>
    where
        T: Serialize,
    {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self>
    where
        T: for<'de> Deserialize<'de>,
    {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl<T: Scalar> Parameterized<T> for Transformer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &Mat<T>)) {
        f(
            &ParamInfo::new(join(prefix, "embedding"), ParamKind::Base),
            &self.embedding,
        );
        for (i, l) in self.encoder.iter().enumerate() {
            let p = join(prefix, &format!("encoder.{i}"));
            l.norm1.visit_params(&join(&p, "norm1"), f);
            l.attn.visit_params(&join(&p, "attn"), f);
            l.norm2.visit_params(&join(&p, "norm2"), f);
            l.ffn.visit_params(&join(&p, "ffn"), f);
        }
        self.encoder_norm.visit_params(&join(prefix, "encoder_norm"), f);
        for (i, l) in self.decoder.iter().enumerate() {
            let p = join(prefix, &format!("decoder.{i}"));
            l.norm1.visit_params(&join(&p, "norm1"), f);
            l.self_attn.visit_params(&join(&p, "self_attn"), f);
            l.norm2.visit_params(&join(&p, "norm2"), f);
            l.cross_attn.visit_params(&join(&p, "cross_attn"), f);
            l.norm3.visit_params(&join(&p, "norm3"), f);
            l.ffn.visit_params(&join(&p, "ffn"), f);
        }
        self.decoder_norm.visit_params(&join(prefix, "decoder_norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &mut Mat<T>)) {
        f(
            &ParamInfo::new(join(prefix, "embedding"), ParamKind::Base),
            &mut self.embedding,
        );
        for (i, l) in self.encoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("encoder.{i}"));
            l.norm1.visit_params_mut(&join(&p, "norm1"), f);
            l.attn.visit_params_mut(&join(&p, "attn"), f);
            l.norm2.visit_params_mut(&join(&p, "norm2"), f);
            l.ffn.visit_params_mut(&join(&p, "ffn"), f);
        }
        self.encoder_norm.visit_params_mut(&join(prefix, "encoder_norm"), f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("decoder.{i}"));
            l.norm1.visit_params_mut(&join(&p, "norm1"), f);
            l.self_attn.visit_params_mut(&join(&p, "self_attn"), f);
            l.norm2.visit_params_mut(&join(&p, "norm2"), f);
            l.cross_attn.visit_params_mut(&join(&p, "cross_attn"), f);
            l.norm3.visit_params_mut(&join(&p, "norm3"), f);
            l.ffn.visit_params_mut(&join(&p, "ffn"), f);
        }
        self.decoder_norm.visit_params_mut(&join(prefix, "decoder_norm"), f);
    }
}
