//! Parameter enumeration and per-step binding of parameters into a [`Graph`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gradcheck::{GradCheckReport, REL_ERROR_FLOOR};
use crate::numerics::{Graph, Mat, Var};
use crate::scalar::Scalar;

/// Role of a parameter tensor, used for census and optimizer policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Shared backbone: embeddings, attention, norms, base projections.
    Base,
    /// Per-language parameters: low-rank factors or full-rank language experts.
    LanguageSpecific,
    /// Shared low-rank factors trained by fuse distillation.
    SharedFactor,
    /// Switch-layer expert weights.
    Expert,
    /// Switch-layer router.
    Gate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
}

impl ParamInfo {
    pub fn new(name: impl Into<String>, kind: ParamKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything owning trainable matrices. Both visitors must walk parameters in
/// the same deterministic order.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &Mat<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &mut Mat<T>));

    fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        self.visit_params("", &mut |info, _| out.push(info.clone()));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, m| n += m.len());
        n
    }
}

/// Maps parameters of a borrowed model to graph leaves for the duration of one
/// step. Parameters are identified by address, so the owner must stay
/// borrowed and unmoved between binding and reading gradients.
pub struct Binder<T> {
    vars: HashMap<*const Mat<T>, Var>,
}

impl<T: Scalar> Default for Binder<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Binder<T> {
    pub fn new() -> Self {
        Self { vars: HashMap::new() }
    }

    /// Leaf for `p`, created on first use.
    pub fn bind(&mut self, g: &mut Graph<T>, p: &Mat<T>) -> Var {
        *self.vars.entry(p as *const Mat<T>).or_insert_with(|| g.leaf(p.clone()))
    }

    pub fn var_of(&self, p: &Mat<T>) -> Option<Var> {
        self.vars.get(&(p as *const Mat<T>)).copied()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Gradients of every parameter of `owner` in visit order; parameters the
    /// loss never touched get `None`.
    pub fn collect_grads<P: Parameterized<T> + ?Sized>(&self, g: &Graph<T>, owner: &P) -> Vec<Option<Mat<T>>> {
        let mut out = Vec::new();
        owner.visit_params("", &mut |_, m| {
            out.push(self.var_of(m).and_then(|v| g.grad_ref(v).cloned()));
        });
        out
    }
}

impl<T: Scalar> Parameterized<T> for Vec<Mat<T>> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &Mat<T>)) {
        for (i, m) in self.iter().enumerate() {
            f(&ParamInfo::new(join(prefix, &i.to_string()), ParamKind::Base), m);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&ParamInfo, &mut Mat<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            f(&ParamInfo::new(join(prefix, &i.to_string()), ParamKind::Base), m);
        }
    }
}

fn with_param_mut<T: Scalar, P, R>(owner: &mut P, index: usize, f: impl FnOnce(&mut Mat<T>) -> R) -> R
where
    P: Parameterized<T> + ?Sized,
{
    let mut f = Some(f);
    let mut out = None;
    let mut i = 0;
    owner.visit_params_mut("", &mut |_, m| {
        if i == index {
            if let Some(f) = f.take() {
                out = Some(f(m));
            }
        }
        i += 1;
    });
    out.expect("parameter index in range")
}

/// Central-difference check over the parameters of `owner` accepted by
/// `select`. `build` constructs the loss from a fresh graph and binder.
pub fn grad_check_params<T, P, S, F>(owner: &mut P, select: S, eps: f64, build: F) -> Result<GradCheckReport>
where
    T: Scalar,
    P: Parameterized<T>,
    S: Fn(&ParamInfo) -> bool,
    F: FnMut(&P, &mut Graph<T>, &mut Binder<T>) -> Result<Var>,
{
    let build = std::cell::RefCell::new(build);
    grad_check_params_against(
        owner,
        select,
        eps,
        |p: &P, g: &mut Graph<T>, b: &mut Binder<T>| (build.borrow_mut())(p, g, b),
        |p: &P, g: &mut Graph<T>, b: &mut Binder<T>| (build.borrow_mut())(p, g, b),
    )
}

/// As [`grad_check_params`], but the backward-pass gradient comes from
/// `build` while the central differences evaluate `reference`. Used when a
/// loss deliberately stops gradients: `reference` then spells out the
/// function whose derivative the backward pass is supposed to produce.
pub fn grad_check_params_against<T, P, S, F, R>(
    owner: &mut P,
    select: S,
    eps: f64,
    mut build: F,
    mut reference: R,
) -> Result<GradCheckReport>
where
    T: Scalar,
    P: Parameterized<T>,
    S: Fn(&ParamInfo) -> bool,
    F: FnMut(&P, &mut Graph<T>, &mut Binder<T>) -> Result<Var>,
    R: FnMut(&P, &mut Graph<T>, &mut Binder<T>) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::config(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let finite = |v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("loss evaluated to {v}")))
        }
    };

    let (analytic, infos) = {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let loss = build(owner, &mut g, &mut b)?;
        finite(g.scalar(loss).to_f64_lossy())?;
        g.backward(loss);
        (b.collect_grads(&g, owner), owner.param_infos())
    };

    let mut eval = |owner: &P| -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let loss = reference(owner, &mut g, &mut b)?;
        finite(g.scalar(loss).to_f64_lossy())
    };

    let h = T::lit(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (pi, info) in infos.iter().enumerate() {
        if !select(info) {
            continue;
        }
        let len = with_param_mut(owner, pi, |m| m.len());
        for k in 0..len {
            let orig = with_param_mut(owner, pi, |m| {
                let o = m.data()[k];
                m.data_mut()[k] = o + h;
                o
            });
            let plus = eval(owner);
            with_param_mut(owner, pi, |m| m.data_mut()[k] = orig - h);
            let minus = eval(owner);
            with_param_mut(owner, pi, |m| m.data_mut()[k] = orig);
            let numeric = (plus? - minus?) / (2.0 * eps);
            let exact = analytic[pi].as_ref().map_or(0.0, |g| g.data()[k].to_f64_lossy());
            let denom = exact.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, k));
            }
        }
    }
    Ok(report)
}

/// FNV-1a; stable across platforms and releases, used to derive per-parameter
/// RNG streams from names.
pub(crate) fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
