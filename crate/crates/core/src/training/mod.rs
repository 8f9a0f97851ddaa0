//! Training schemes: plain cross-entropy, fuse distillation with a detached
//! teacher, and LMS+FD with a symmetric KL term.

pub mod optim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::vocab::PAD;
use crate::data::{fixed_batches, make_batches, Batch, EncodedExample};
use crate::error::{Error, Result};
use crate::lms::{LanguageId, Route};
use crate::model::{FfnStrategy, Transformer};
use crate::numerics::{Graph, Var};
use crate::params::Binder;
use crate::scalar::Scalar;

pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState, InverseSqrt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Sentences per batch.
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup: u64,
    /// Train with a second, shared-route pass distilled from the LS route.
    pub fd_enabled: bool,
    /// Symmetric, undetached KL between the two routes.
    pub fd_symmetric: bool,
    /// Weight on each of the two cross-entropy terms under FD.
    pub ce_weight: f64,
    pub fd_weight: f64,
    pub clip_norm: f64,
    /// Sampling temperature over language directions.
    pub temperature: f64,
    pub seed: u64,
    /// Validate every this many steps; 0 disables periodic validation.
    pub eval_interval: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            warmup: 100,
            fd_enabled: false,
            fd_symmetric: false,
            ce_weight: 0.5,
            fd_weight: 1.0,
            clip_norm: 1.0,
            temperature: 5.0,
            seed: 0,
            eval_interval: 0,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch_size and eval_batch_size must be at least 1".into());
        }
        if self.temperature.is_nan() || self.temperature < 1.0 {
            return fail(format!("temperature {} must be >= 1", self.temperature));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return fail("adam_eps must be positive".into());
        }
        for (name, w) in [
            ("ce_weight", self.ce_weight),
            ("fd_weight", self.fd_weight),
            ("clip_norm", self.clip_norm),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return fail(format!("{name} {w} must be finite and >= 0"));
            }
        }
        if self.fd_symmetric && !self.fd_enabled {
            return fail("fd_symmetric requires fd_enabled".into());
        }
        Ok(())
    }

    pub fn scheme(&self) -> Scheme {
        match (self.fd_enabled, self.fd_symmetric) {
            (false, _) => Scheme::Plain,
            (true, false) => Scheme::Fd,
            (true, true) => Scheme::LmsFd,
        }
    }

    pub fn schedule(&self) -> InverseSqrt {
        InverseSqrt {
            peak: self.lr,
            warmup: self.warmup,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Cross-entropy through the LS route only.
    Plain,
    /// `w_ce·(CE_ls + CE_shared) + w_fd·KL(detach(p_ls) ∥ p_shared)`.
    Fd,
    /// `w_ce·(CE_ls + CE_shared) + w_fd·½(KL(p_ls ∥ p_s) + KL(p_s ∥ p_ls))`.
    LmsFd,
}

impl Scheme {
    /// Checks that `strategy` provides what the scheme needs.
    pub fn check(self, strategy: FfnStrategy) -> Result<()> {
        match self {
            Scheme::Plain => Ok(()),
            Scheme::Fd if strategy.has_shared_route() => Ok(()),
            Scheme::LmsFd if strategy == FfnStrategy::LmsFd => Ok(()),
            _ => Err(Error::config(format!(
                "training scheme {self:?} is not available for strategy {}",
                strategy.as_str()
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub fd: f64,
    pub balance: f64,
}

impl LossWeights {
    pub fn new(train: &TrainConfig, balance: f64) -> Self {
        Self {
            ce: train.ce_weight,
            fd: train.fd_weight,
            balance,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 0.5,
            fd: 1.0,
            balance: 0.01,
        }
    }
}

/// Graph handles for the loss terms of one batch.
pub struct LossTerms {
    pub total: Var,
    pub ce_ls: Var,
    pub ce_shared: Option<Var>,
    pub fd: Option<Var>,
    pub balance: Option<Var>,
    pub logits_ls: Var,
    pub logits_shared: Option<Var>,
}

/// Builds the loss of `scheme` for one batch on `g`.
pub fn build_loss<T: Scalar>(
    model: &Transformer<T>,
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    batch: &Batch,
    scheme: Scheme,
    w: &LossWeights,
) -> Result<LossTerms> {
    scheme.check(model.config().ffn_strategy)?;
    let pad = batch.pad as usize;
    let ls = model.forward(g, b, batch, Route::Ls)?;
    let balance = ls.balance_loss;

    if scheme == Scheme::Plain {
        let ce_ls = g.cross_entropy(ls.logits, &ls.targets, pad)?;
        let mut total = ce_ls;
        if let Some(bl) = balance {
            let weighted = g.scale(bl, T::lit(w.balance));
            total = g.add(total, weighted)?;
        }
        return Ok(LossTerms {
            total,
            ce_ls,
            ce_shared: None,
            fd: None,
            balance,
            logits_ls: ls.logits,
            logits_shared: None,
        });
    }

    let sh = model.forward(g, b, batch, Route::Shared)?;
    let parts = compose_two_route_loss(g, ls.logits, sh.logits, &ls.targets, pad, scheme, w)?;
    Ok(LossTerms {
        total: parts.total,
        ce_ls: parts.ce_ls,
        ce_shared: Some(parts.ce_shared),
        fd: Some(parts.fd),
        balance,
        logits_ls: ls.logits,
        logits_shared: Some(sh.logits),
    })
}

/// Loss terms of a two-route scheme.
pub struct TwoRouteLoss {
    pub total: Var,
    pub ce_ls: Var,
    pub ce_shared: Var,
    pub fd: Var,
}

/// Combines LS-route and shared-route logits (same rows, same targets) into
/// `w_ce·(CE_ls + CE_shared) + w_fd·L_fd`, with `L_fd` the detached KL under
/// [`Scheme::Fd`] and the symmetric KL under [`Scheme::LmsFd`]. Rows whose
/// target is `pad` are excluded from every term.
pub fn compose_two_route_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits_ls: Var,
    logits_shared: Var,
    targets: &[usize],
    pad: usize,
    scheme: Scheme,
    w: &LossWeights,
) -> Result<TwoRouteLoss> {
    let ce_ls = g.cross_entropy(logits_ls, targets, pad)?;
    let ce_shared = g.cross_entropy(logits_shared, targets, pad)?;
    let mask: Vec<bool> = targets.iter().map(|&t| t != pad).collect();
    let fd = match scheme {
        Scheme::Plain => return Err(Error::config("plain training has no distillation term")),
        Scheme::Fd => g.kl_rows(logits_ls, logits_shared, true, Some(&mask))?,
        Scheme::LmsFd => {
            let fwd = g.kl_rows(logits_ls, logits_shared, false, Some(&mask))?;
            let bwd = g.kl_rows(logits_shared, logits_ls, false, Some(&mask))?;
            let both = g.add(fwd, bwd)?;
            g.scale(both, T::lit(0.5))
        }
    };
    let ce_sum = g.add(ce_ls, ce_shared)?;
    let ce_part = g.scale(ce_sum, T::lit(w.ce));
    let fd_part = g.scale(fd, T::lit(w.fd));
    let total = g.add(ce_part, fd_part)?;
    Ok(TwoRouteLoss {
        total,
        ce_ls,
        ce_shared,
        fd,
    })
}

/// Losses and routing of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub src_lang: LanguageId,
    pub tgt_lang: LanguageId,
    pub ce_ls: f64,
    pub ce_shared: Option<f64>,
    pub fd_loss: Option<f64>,
    pub balance_loss: Option<f64>,
    pub total_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Model-side optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub state: AdamState<T>,
    pub schedule: InverseSqrt,
    pub clip_norm: f64,
    pub freeze_base: bool,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(train: &TrainConfig, freeze_base: bool) -> Self {
        Self {
            state: AdamState::new(train.adam()),
            schedule: train.schedule(),
            clip_norm: train.clip_norm,
            freeze_base,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.state.t
    }
}

/// Forward, backward and one Adam update under `scheme`.
pub fn train_step<T: Scalar>(
    model: &mut Transformer<T>,
    batch: &Batch,
    opt: &mut Optimizer<T>,
    scheme: Scheme,
    w: &LossWeights,
) -> Result<StepReport> {
    let step = opt.steps_taken() + 1;
    let mut g = Graph::new();
    let mut b = Binder::new();
    let terms = build_loss(model, &mut g, &mut b, batch, scheme, w)?;
    let read = |v: Var| g.scalar(v).to_f64_lossy();
    let total = read(terms.total);
    if !total.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!(
                "total loss {total} on {}-{} (ce_ls {})",
                batch.src_lang,
                batch.tgt_lang,
                read(terms.ce_ls)
            ),
        });
    }
    let (src_lang, tgt_lang) = batch.pair();
    let mut report = StepReport {
        step,
        src_lang,
        tgt_lang,
        ce_ls: read(terms.ce_ls),
        ce_shared: terms.ce_shared.map(read),
        fd_loss: terms.fd.map(read),
        balance_loss: terms.balance.map(read),
        total_loss: total,
        lr: opt.schedule.lr(step),
        grad_norm: 0.0,
    };
    g.backward(terms.total);
    let mut grads = b.collect_grads(&g, &*model);
    if opt.freeze_base {
        let infos = crate::params::Parameterized::param_infos(&*model);
        for (slot, info) in grads.iter_mut().zip(&infos) {
            if info.kind == crate::params::ParamKind::Base {
                *slot = None;
            }
        }
    }
    report.grad_norm = clip_global_norm(&mut grads, opt.clip_norm);
    if !report.grad_norm.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("gradient norm {}", report.grad_norm),
        });
    }
    adam_step(
        model,
        &grads,
        &mut opt.state,
        report.lr,
        optim::trainable_filter(opt.freeze_base),
    )?;
    Ok(report)
}

/// One step of plain cross-entropy training.
pub fn ce_step<T: Scalar>(
    model: &mut Transformer<T>,
    batch: &Batch,
    opt: &mut Optimizer<T>,
    w: &LossWeights,
) -> Result<StepReport> {
    train_step(model, batch, opt, Scheme::Plain, w)
}

/// One fuse-distillation step: two forward passes, one backward pass.
pub fn fd_step<T: Scalar>(
    model: &mut Transformer<T>,
    batch: &Batch,
    opt: &mut Optimizer<T>,
    w: &LossWeights,
) -> Result<StepReport> {
    train_step(model, batch, opt, Scheme::Fd, w)
}

/// One LMS+FD step with the symmetric, undetached KL term.
pub fn lms_fd_step<T: Scalar>(
    model: &mut Transformer<T>,
    batch: &Batch,
    opt: &mut Optimizer<T>,
    w: &LossWeights,
) -> Result<StepReport> {
    train_step(model, batch, opt, Scheme::LmsFd, w)
}

/// Teacher-forced token accuracy for one direction and route.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub correct: usize,
    pub total: usize,
    /// Percentage in [0, 100].
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteEval {
    /// Keyed by `"{src}-{tgt}"`.
    pub pairs: BTreeMap<String, PairAccuracy>,
    /// Unweighted mean of the per-pair accuracies.
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    /// Keyed by route name (`"ls"`, `"shared"`).
    pub routes: BTreeMap<String, RouteEval>,
}

pub fn pair_key(src: LanguageId, tgt: LanguageId) -> String {
    format!("{src}-{tgt}")
}

/// Routes a model can be evaluated through.
pub fn eval_routes<T: Scalar>(model: &Transformer<T>) -> Vec<Route> {
    if model.config().ffn_strategy.has_shared_route() {
        vec![Route::Ls, Route::Shared]
    } else {
        vec![Route::Ls]
    }
}

pub fn evaluate_route<T: Scalar>(model: &Transformer<T>, batches: &[Batch], route: Route) -> Result<RouteEval> {
    let mut tally: BTreeMap<(LanguageId, LanguageId), (usize, usize)> = BTreeMap::new();
    for batch in batches {
        let (c, t) = model.token_accuracy(batch, route)?;
        let e = tally.entry(batch.pair()).or_default();
        e.0 += c;
        e.1 += t;
    }
    let pairs: BTreeMap<String, PairAccuracy> = tally
        .into_iter()
        .map(|((s, t), (correct, total))| {
            let accuracy = if total == 0 {
                0.0
            } else {
                100.0 * correct as f64 / total as f64
            };
            (
                pair_key(s, t),
                PairAccuracy {
                    correct,
                    total,
                    accuracy,
                },
            )
        })
        .collect();
    let mean_accuracy = if pairs.is_empty() {
        0.0
    } else {
        pairs.values().map(|p| p.accuracy).sum::<f64>() / pairs.len() as f64
    };
    Ok(RouteEval { pairs, mean_accuracy })
}

/// Evaluates every available route; routes run on separate threads over the
/// shared read-only model.
pub fn evaluate<T: Scalar>(model: &Transformer<T>, batches: &[Batch], step: u64) -> Result<EvalRecord> {
    let routes = eval_routes(model);
    let results: Vec<Result<RouteEval>> = std::thread::scope(|s| {
        let handles: Vec<_> = routes
            .iter()
            .map(|&r| s.spawn(move || evaluate_route(model, batches, r)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut out = BTreeMap::new();
    for (route, res) in routes.iter().zip(results) {
        out.insert(route.as_str().to_string(), res?);
    }
    Ok(EvalRecord { step, routes: out })
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepReport),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepReport>,
    pub evals: Vec<EvalRecord>,
}

/// Trains `model` for `cfg.steps` steps on homogeneous batches drawn with
/// temperature sampling. `on_record` sees every step and eval record as it
/// is produced.
pub fn train<T: Scalar>(
    model: &mut Transformer<T>,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let scheme = cfg.scheme();
    scheme.check(model.config().ffn_strategy)?;
    let weights = LossWeights::new(cfg, model.config().balance_weight);
    let mut opt = Optimizer::new(cfg, model.config().freeze_base);
    let mut stream = make_batches(train_set, cfg.batch_size, PAD, cfg.temperature, cfg.seed)?;
    let eval_batches = if cfg.eval_interval > 0 {
        fixed_batches(valid_set, cfg.eval_batch_size, PAD)?
    } else {
        Vec::new()
    };

    let mut history = TrainHistory::default();
    for step in 1..=cfg.steps {
        let batch = stream.next().expect("batch stream is endless");
        let report = train_step(model, &batch, &mut opt, scheme, &weights)?;
        on_record(&MetricRecord::Step(report.clone()))?;
        history.steps.push(report);
        if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 && !eval_batches.is_empty() {
            let rec = evaluate(model, &eval_batches, step)?;
            on_record(&MetricRecord::Eval(rec.clone()))?;
            history.evals.push(rec);
        }
    }
    Ok(history)
}
