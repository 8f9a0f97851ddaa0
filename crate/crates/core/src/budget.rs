//! Closed-form parameter and FLOPs accounting for LS, MoE, LMS and LMS+FD.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FfnStrategy, ModelConfig};
use crate::params::ParamKind;

/// Shapes of one language-specific projection setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub languages: u64,
    pub r: u64,
    pub c: u64,
    pub d: u64,
    pub experts: u64,
    pub layers: u64,
    pub projections_per_ffn: u64,
}

impl ShapeParams {
    pub fn new(languages: u64, r: u64, c: u64, d: u64, experts: u64, layers: u64) -> Self {
        Self {
            languages,
            r,
            c,
            d,
            experts,
            layers,
            projections_per_ffn: 2,
        }
    }

    /// `L`, `r`, `c` and `d` must be positive; `E = 0` and `N = 0` are
    /// accepted as degenerate cases.
    pub fn validate(&self) -> Result<()> {
        if self.languages == 0 || self.r == 0 || self.c == 0 || self.d == 0 {
            return Err(Error::config(format!(
                "L, r, c and d must be positive (got L={}, r={}, c={}, d={})",
                self.languages, self.r, self.c, self.d
            )));
        }
        Ok(())
    }

    /// Rank below which LMS uses fewer parameters than a full LS matrix.
    pub fn efficiency_bound(&self) -> Ratio<u64> {
        Ratio::new(self.r * self.c, self.r + self.c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodBudget {
    pub train_extra_params: u64,
    pub inference_extra_params: u64,
    pub extra_flops_per_token: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub shape: ShapeParams,
    pub ls: MethodBudget,
    pub moe: MethodBudget,
    pub lms: MethodBudget,
    pub lms_fd: MethodBudget,
    /// `d < r·c / (r + c)`: LMS is cheaper than a full-rank LS projection.
    pub lms_parameter_efficient: bool,
}

impl BudgetReport {
    pub fn methods(&self) -> [(&'static str, &MethodBudget); 4] {
        [
            ("LS", &self.ls),
            ("MoE", &self.moe),
            ("LMS", &self.lms),
            ("LMS+FD", &self.lms_fd),
        ]
    }
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.shape;
        writeln!(
            f,
            "shape: L={} r={} c={} d={} E={} N={}",
            s.languages, s.r, s.c, s.d, s.experts, s.layers
        )?;
        writeln!(
            f,
            "{:<8} {:>16} {:>16} {:>14}",
            "method", "train params", "infer params", "flops/token"
        )?;
        for (name, m) in self.methods() {
            writeln!(
                f,
                "{:<8} {:>16} {:>16} {:>14}",
                name, m.train_extra_params, m.inference_extra_params, m.extra_flops_per_token
            )?;
        }
        writeln!(f, "full-model LS params (LMS): {}", budget_full_model(s))?;
        write!(
            f,
            "LMS parameter-efficient (d < rc/(r+c) = {:.3}): {}",
            ratio_to_f64(s.efficiency_bound()),
            if self.lms_parameter_efficient { "yes" } else { "no" }
        )
    }
}

/// Extra parameters and FLOPs of one LS projection under each method.
pub fn budget_single_projection(p: &ShapeParams) -> Result<BudgetReport> {
    p.validate()?;
    let full = p.r * p.c;
    let low = p.d * (p.r + p.c);
    let same = |params: u64, flops: u64| MethodBudget {
        train_extra_params: params,
        inference_extra_params: params,
        extra_flops_per_token: flops,
    };
    Ok(BudgetReport {
        shape: *p,
        ls: same(p.languages * full, full),
        moe: same(p.experts * full, if p.experts == 0 { 0 } else { full }),
        lms: same(p.languages * low, low),
        lms_fd: MethodBudget {
            train_extra_params: (p.languages + 1) * low,
            inference_extra_params: low,
            extra_flops_per_token: low,
        },
        lms_parameter_efficient: Ratio::from_integer(p.d) < p.efficiency_bound(),
    })
}

/// Language-specific parameters of all FFN projections on one side:
/// `2 · L · N · d · (c + r)`.
pub fn budget_full_model(p: &ShapeParams) -> u64 {
    p.projections_per_ffn * p.languages * p.layers * p.d * (p.c + p.r)
}

/// Speed-up of a low-rank projection over a full-rank one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRatio {
    pub numerator: u64,
    pub denominator: u64,
    pub value: f64,
    pub rendered: String,
}

impl FlopsRatio {
    pub fn exact(&self) -> Ratio<u64> {
        Ratio::new(self.numerator, self.denominator)
    }
}

fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `r·c / (d·(r + c))` as a reduced fraction, its float value and a short
/// rendering such as `≈20×`.
pub fn flops_ratio(r: u64, c: u64, d: u64) -> Result<FlopsRatio> {
    if d == 0 || r == 0 || c == 0 {
        return Err(Error::config(format!(
            "flops ratio needs r, c, d >= 1 (got {r}, {c}, {d})"
        )));
    }
    let exact = Ratio::new(r * c, d * (r + c));
    let value = ratio_to_f64(exact);
    let rendered = if exact.is_integer() {
        format!("{}×", exact.numer())
    } else {
        format!("≈{}×", value.round())
    };
    Ok(FlopsRatio {
        numerator: *exact.numer(),
        denominator: *exact.denom(),
        value,
        rendered,
    })
}

/// Predicted parameter counts of a built model, by kind.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelParams {
    pub total: u64,
    pub by_kind: BTreeMap<ParamKind, u64>,
    /// Language-specific parameters per side (encoder, then decoder).
    pub language_specific_per_side: [u64; 2],
}

impl ModelParams {
    pub fn kind(&self, k: ParamKind) -> u64 {
        self.by_kind.get(&k).copied().unwrap_or(0)
    }
}

/// Shape parameters implied by a model configuration.
pub fn shape_of(cfg: &ModelConfig) -> ShapeParams {
    ShapeParams::new(
        cfg.languages as u64,
        cfg.ffn_dim as u64,
        cfg.embed_dim as u64,
        cfg.lms_rank as u64,
        cfg.n_experts as u64,
        cfg.n_layers as u64,
    )
}

/// Closed-form parameter counts of `build_model(cfg)`.
///
/// FFN language-specific parameters follow [`budget_full_model`]. When LMS
/// factors are placed in attention, every attention projection (four per
/// encoder layer, eight per decoder layer counting cross-attention) adds
/// `L · d · 2c`.
pub fn model_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let v = cfg.vocab_size as u64;
    let c = cfg.embed_dim as u64;
    let r = cfg.ffn_dim as u64;
    let n = cfg.n_layers as u64;
    let l = cfg.languages as u64;
    let d = cfg.lms_rank as u64;
    let e = cfg.n_experts as u64;
    let shape = shape_of(cfg);
    let fd = cfg.ffn_strategy == FfnStrategy::LmsFd;

    let mut kinds: BTreeMap<ParamKind, u64> = BTreeMap::new();
    let mut add = |k: ParamKind, x: u64| {
        if x > 0 {
            *kinds.entry(k).or_default() += x;
        }
    };
    let mut ls_side = [0u64; 2];

    // Embedding, layer norms (2 per encoder layer, 3 per decoder layer, 2 final).
    add(ParamKind::Base, v * c);
    add(ParamKind::Base, 2 * c * (2 * n + 3 * n + 2));

    // Attention: 4 c×c projections per encoder layer, 8 per decoder layer.
    for (side, projections) in [(0, 4 * n), (1, 8 * n)] {
        add(ParamKind::Base, projections * c * c);
        if cfg.lms_in_attention() {
            let ls = projections * l * d * 2 * c;
            add(ParamKind::LanguageSpecific, ls);
            ls_side[side] += ls;
            if fd {
                add(ParamKind::SharedFactor, projections * d * 2 * c);
            }
        }
    }

    // FFN blocks.
    let dense_ffn = 2 * r * c;
    for side in 0..2 {
        match cfg.ffn_strategy {
            FfnStrategy::Dense => add(ParamKind::Base, n * dense_ffn),
            FfnStrategy::FullRankLs => {
                add(ParamKind::Base, n * dense_ffn);
                let ls = n * l * dense_ffn;
                add(ParamKind::LanguageSpecific, ls);
                ls_side[side] += ls;
            }
            FfnStrategy::SwitchTop1 => {
                let switch_layers = (0..cfg.n_layers).filter(|&i| cfg.is_switch_layer(i)).count() as u64;
                add(ParamKind::Base, (n - switch_layers) * dense_ffn);
                add(ParamKind::Gate, switch_layers * e * c);
                add(ParamKind::Expert, switch_layers * e * dense_ffn);
            }
            FfnStrategy::Lms | FfnStrategy::LmsFd => {
                add(ParamKind::Base, n * dense_ffn);
                if cfg.lms_in_ffn() {
                    let ls = budget_full_model(&shape);
                    add(ParamKind::LanguageSpecific, ls);
                    ls_side[side] += ls;
                    if fd {
                        add(ParamKind::SharedFactor, shape.projections_per_ffn * n * d * (c + r));
                    }
                }
            }
        }
    }

    Ok(ModelParams {
        total: kinds.values().sum(),
        by_kind: kinds,
        language_specific_per_side: ls_side,
    })
}
