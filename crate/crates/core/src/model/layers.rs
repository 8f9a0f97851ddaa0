//! Building blocks of the encoder-decoder: projections, norms, attention, FFNs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lms::{LanguageId, LmsLinear, Route, SynthesisMode};
use crate::model::switch::{switch_gate, GateDecision};
use crate::numerics::{Graph, Mat, Var};
use crate::params::{join, stable_hash, Binder, ParamInfo, ParamKind, Parameterized};
use crate::scalar::Scalar;

/// Additive mask value for disallowed attention logits.
pub const MASKED: f64 = -1e9;

/// Deterministic stream for the parameter called `name`.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stable_hash(name));
    rng
}

pub(crate) fn init_weight<T: Scalar>(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Mat<T> {
    Mat::gaussian(rows, cols, std, &mut param_rng(seed, name))
}

/// Languages used by one side of the network for the current batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SideRouting {
    pub src: LanguageId,
    pub tgt: LanguageId,
    /// Language of this side's text: source for the encoder, target for the decoder.
    pub side: LanguageId,
    pub route: Route,
}

impl SideRouting {
    /// Factor keys passed to an LMS layer: `(src, tgt)` pair-wise, or the
    /// side's own language for both under language-wise synthesis.
    fn lms_keys(&self, mode: SynthesisMode) -> (LanguageId, LanguageId) {
        match mode {
            SynthesisMode::PairWise => (self.src, self.tgt),
            SynthesisMode::LanguageWise => (self.side, self.side),
        }
    }
}

/// A linear map without bias, optionally carrying language factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection<T> {
    Dense(Mat<T>),
    Lms(LmsLinear<T>),
}

impl<T: Scalar> Projection<T> {
    /// `x` (n×in) → n×out.
    pub fn forward(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var, routing: &SideRouting) -> Result<Var> {
        match self {
            Projection::Dense(w) => {
                let w = b.bind(g, w);
                g.matmul_nt(x, w)
            }
            Projection::Lms(layer) => {
                let (s, t) = routing.lms_keys(layer.mode());
                layer.forward_rows(g, b, x, s, t, routing.route)
            }
        }
    }

    pub fn base(&self) -> &Mat<T> {
        match self {
            Projection::Dense(w) => w,
            Projection::Lms(l) => l.base(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Projection<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &Mat<T>)) {
        match self {
            Projection::Dense(w) => f(&ParamInfo::new(join(prefix, "weight"), ParamKind::Base), w),
            Projection::Lms(l) => l.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &mut Mat<T>)) {
        match self {
            Projection::Dense(w) => f(&ParamInfo::new(join(prefix, "weight"), ParamKind::Base), w),
            Projection::Lms(l) => l.visit_params_mut(prefix, f),
        }
    }
}

/// Options for creating a projection's language factors.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LmsSpec {
    pub rank: usize,
    pub languages: usize,
    pub mode: SynthesisMode,
    pub with_shared: bool,
}

pub(crate) fn make_projection<T: Scalar>(
    seed: u64,
    name: &str,
    rows: usize,
    cols: usize,
    lms: Option<LmsSpec>,
) -> Result<Projection<T>> {
    let base = init_weight(seed, name, rows, cols, 1.0 / (cols as f64).sqrt());
    match lms {
        None => Ok(Projection::Dense(base)),
        Some(spec) => {
            let mut rng = param_rng(seed, &format!("{name}.factors"));
            Ok(Projection::Lms(LmsLinear::with_base(
                base,
                spec.rank,
                spec.languages,
                spec.mode,
                spec.with_shared,
                &mut rng,
            )?))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gain: Mat<T>,
    pub bias: Mat<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Mat::filled(1, dim, T::one()),
            bias: Mat::zeros(1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        let gain = b.bind(g, &self.gain);
        let bias = b.bind(g, &self.bias);
        g.layer_norm(x, gain, bias)
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &Mat<T>)) {
        f(&ParamInfo::new(join(prefix, "gain"), ParamKind::Base), &self.gain);
        f(&ParamInfo::new(join(prefix, "bias"), ParamKind::Base), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &mut Mat<T>)) {
        f(&ParamInfo::new(join(prefix, "gain"), ParamKind::Base), &mut self.gain);
        f(&ParamInfo::new(join(prefix, "bias"), ParamKind::Base), &mut self.bias);
    }
}

/// Geometry of a stacked batch: `sentences` blocks of `width` rows, of which
/// the first `lens[b]` are real tokens.
#[derive(Clone, Debug)]
pub struct Blocks {
    pub width: usize,
    pub lens: Vec<usize>,
}

impl Blocks {
    pub fn sentences(&self) -> usize {
        self.lens.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention<T> {
    pub q: Projection<T>,
    pub k: Projection<T>,
    pub v: Projection<T>,
    pub o: Projection<T>,
}

impl<T: Scalar> Attention<T> {
    pub(crate) fn new(seed: u64, name: &str, dim: usize, lms: Option<LmsSpec>) -> Result<Self> {
        let mk = |p: &str| make_projection(seed, &join(name, p), dim, dim, lms);
        Ok(Self {
            q: mk("q")?,
            k: mk("k")?,
            v: mk("v")?,
            o: mk("o")?,
        })
    }

    /// Multi-head attention of `queries` over `memory`, sentence by sentence.
    /// Keys beyond each sentence's length are masked; `causal` additionally
    /// hides future positions.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        queries: Var,
        q_blocks: &Blocks,
        memory: Var,
        m_blocks: &Blocks,
        heads: usize,
        causal: bool,
        routing: &SideRouting,
    ) -> Result<Var> {
        let q = self.q.forward(g, b, queries, routing)?;
        let k = self.k.forward(g, b, memory, routing)?;
        let v = self.v.forward(g, b, memory, routing)?;
        let dim = g.value(q).cols();
        let dh = dim / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (tq, tk) = (q_blocks.width, m_blocks.width);

        let mut per_sentence = Vec::with_capacity(q_blocks.sentences());
        for s in 0..q_blocks.sentences() {
            let mut mask = Mat::zeros(tq, tk);
            for i in 0..tq {
                for j in 0..tk {
                    if j >= m_blocks.lens[s] || (causal && j > i) {
                        mask.set(i, j, T::lit(MASKED));
                    }
                }
            }
            let mask = g.constant(mask);
            let qs = g.slice_rows(q, s * tq, tq)?;
            let ks = g.slice_rows(k, s * tk, tk)?;
            let vs = g.slice_rows(v, s * tk, tk)?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice_cols(qs, h * dh, dh)?;
                let kh = g.slice_cols(ks, h * dh, dh)?;
                let vh = g.slice_cols(vs, h * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let scores = g.add(scores, mask)?;
                let probs = g.softmax_rows(scores);
                outs.push(g.matmul(probs, vh)?);
            }
            per_sentence.push(if heads == 1 { outs[0] } else { g.concat_cols(&outs)? });
        }
        let joined = g.concat_rows(&per_sentence)?;
        self.o.forward(g, b, joined, routing)
    }
}

impl<T: Scalar> Parameterized<T> for Attention<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &Mat<T>)) {
        self.q.visit_params(&join(prefix, "q"), f);
        self.k.visit_params(&join(prefix, "k"), f);
        self.v.visit_params(&join(prefix, "v"), f);
        self.o.visit_params(&join(prefix, "o"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &mut Mat<T>)) {
        self.q.visit_params_mut(&join(prefix, "q"), f);
        self.k.visit_params_mut(&join(prefix, "k"), f);
        self.v.visit_params_mut(&join(prefix, "v"), f);
        self.o.visit_params_mut(&join(prefix, "o"), f);
    }
}

/// Plain two-layer FFN (`down · relu(up · x)`) used by experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertFfn<T> {
    pub up: Mat<T>,
    pub down: Mat<T>,
}

impl<T: Scalar> ExpertFfn<T> {
    fn new(seed: u64, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: init_weight(seed, &join(name, "up"), hidden, dim, 1.0 / (dim as f64).sqrt()),
            down: init_weight(seed, &join(name, "down"), dim, hidden, 1.0 / (hidden as f64).sqrt()),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        let up = b.bind(g, &self.up);
        let down = b.bind(g, &self.down);
        let h = g.matmul_nt(x, up)?;
        let h = g.relu(h);
        g.matmul_nt(h, down)
    }

    fn visit(&self, prefix: &str, kind: ParamKind, f: &mut dyn FnMut(&ParamInfo, &Mat<T>)) {
        f(&ParamInfo::new(join(prefix, "up"), kind), &self.up);
        f(&ParamInfo::new(join(prefix, "down"), kind), &self.down);
    }

    fn visit_mut(&mut self, prefix: &str, kind: ParamKind, f: &mut dyn FnMut(&ParamInfo, &mut Mat<T>)) {
        f(&ParamInfo::new(join(prefix, "up"), kind), &mut self.up);
        f(&ParamInfo::new(join(prefix, "down"), kind), &mut self.down);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ffn<T> {
    /// `up` (r×c) and `down` (c×r), each dense or with language factors.
    Projected { up: Projection<T>, down: Projection<T> },
    /// Shared FFN plus one full-rank FFN per language.
    LanguageExperts {
        shared: ExpertFfn<T>,
        experts: Vec<ExpertFfn<T>>,
    },
    /// Top-1 routed experts.
    Switch { gate: Mat<T>, experts: Vec<ExpertFfn<T>> },
}

/// Output of an FFN block; switch blocks also report their balance loss.
pub struct FfnOutput {
    pub value: Var,
    pub balance_loss: Option<Var>,
    pub routing: Option<Vec<usize>>,
}

impl<T: Scalar> Ffn<T> {
    pub(crate) fn projected(seed: u64, name: &str, dim: usize, hidden: usize, lms: Option<LmsSpec>) -> Result<Self> {
        Ok(Ffn::Projected {
            up: make_projection(seed, &join(name, "up"), hidden, dim, lms)?,
            down: make_projection(seed, &join(name, "down"), dim, hidden, lms)?,
        })
    }

    pub(crate) fn language_experts(seed: u64, name: &str, dim: usize, hidden: usize, languages: usize) -> Self {
        Ffn::LanguageExperts {
            shared: ExpertFfn::new(seed, name, dim, hidden),
            experts: (0..languages)
                .map(|l| ExpertFfn::new(seed, &join(name, &format!("lang.{l}")), dim, hidden))
                .collect(),
        }
    }

    pub(crate) fn switch(seed: u64, name: &str, dim: usize, hidden: usize, experts: usize) -> Self {
        Ffn::Switch {
            gate: init_weight(seed, &join(name, "gate"), experts, dim, 0.1),
            experts: (0..experts)
                .map(|e| ExpertFfn::new(seed, &join(name, &format!("expert.{e}")), dim, hidden))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var, routing: &SideRouting) -> Result<FfnOutput> {
        match self {
            Ffn::Projected { up, down } => {
                let h = up.forward(g, b, x, routing)?;
                let h = g.relu(h);
                let value = down.forward(g, b, h, routing)?;
                Ok(FfnOutput {
                    value,
                    balance_loss: None,
                    routing: None,
                })
            }
            Ffn::LanguageExperts { shared, experts } => {
                let module = match routing.route {
                    Route::Shared => shared,
                    Route::Ls => experts.get(routing.side.0).ok_or_else(|| crate::error::Error::Lookup {
                        kind: "language",
                        name: routing.side.to_string(),
                    })?,
                };
                Ok(FfnOutput {
                    value: module.forward(g, b, x)?,
                    balance_loss: None,
                    routing: None,
                })
            }
            Ffn::Switch { gate, experts } => {
                let gate = b.bind(g, gate);
                let GateDecision {
                    expert,
                    probs,
                    balance_loss,
                    ..
                } = switch_gate(g, x, gate)?;
                let n = g.value(x).rows();
                let chosen = g.pick_per_row(probs, &expert)?;
                let mut acc: Option<Var> = None;
                for (e, module) in experts.iter().enumerate() {
                    let rows: Vec<usize> = (0..n).filter(|&i| expert[i] == e).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let xe = g.gather_rows(x, &rows)?;
                    let he = module.forward(g, b, xe)?;
                    let pe = g.gather_rows(chosen, &rows)?;
                    let he = g.scale_rows(he, pe)?;
                    let placed = g.scatter_rows(he, &rows, n)?;
                    acc = Some(match acc {
                        None => placed,
                        Some(prev) => g.add(prev, placed)?,
                    });
                }
                let value = acc.expect("every token is routed to some expert");
                Ok(FfnOutput {
                    value,
                    balance_loss: Some(balance_loss),
                    routing: Some(expert),
                })
            }
        }
    }
}

impl<T: Scalar> Parameterized<T> for Ffn<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &Mat<T>)) {
        match self {
            Ffn::Projected { up, down } => {
                up.visit_params(&join(prefix, "up"), f);
                down.visit_params(&join(prefix, "down"), f);
            }
            Ffn::LanguageExperts { shared, experts } => {
                shared.visit(prefix, ParamKind::Base, f);
                for (l, e) in experts.iter().enumerate() {
                    e.visit(&join(prefix, &format!("lang.{l}")), ParamKind::LanguageSpecific, f);
                }
            }
            Ffn::Switch { gate, experts } => {
                f(&ParamInfo::new(join(prefix, "gate"), ParamKind::Gate), gate);
                for (i, e) in experts.iter().enumerate() {
                    e.visit(&join(prefix, &format!("expert.{i}")), ParamKind::Expert, f);
                }
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &mut Mat<T>)) {
        match self {
            Ffn::Projected { up, down } => {
                up.visit_params_mut(&join(prefix, "up"), f);
                down.visit_params_mut(&join(prefix, "down"), f);
            }
            Ffn::LanguageExperts { shared, experts } => {
                shared.visit_mut(prefix, ParamKind::Base, f);
                for (l, e) in experts.iter_mut().enumerate() {
                    e.visit_mut(&join(prefix, &format!("lang.{l}")), ParamKind::LanguageSpecific, f);
                }
            }
            Ffn::Switch { gate, experts } => {
                f(&ParamInfo::new(join(prefix, "gate"), ParamKind::Gate), gate);
                for (i, e) in experts.iter_mut().enumerate() {
                    e.visit_mut(&join(prefix, &format!("expert.{i}")), ParamKind::Expert, f);
                }
            }
        }
    }
}
