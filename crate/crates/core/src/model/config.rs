use serde::{Deserialize, Serialize};

use crate::data::vocab::FIRST_TAG;
use crate::error::{Error, Result};
use crate::lms::SynthesisMode;

/// How each FFN block is parameterized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnStrategy {
    #[default]
    Dense,
    /// A shared FFN plus one full-rank FFN per language.
    FullRankLs,
    /// Top-1 routed experts in every second FFN layer.
    SwitchTop1,
    /// Base weights plus per-language low-rank factors.
    Lms,
    /// As `Lms`, plus shared low-rank factors for distillation.
    LmsFd,
}

impl FfnStrategy {
    pub const ALL: [FfnStrategy; 5] = [
        FfnStrategy::Dense,
        FfnStrategy::FullRankLs,
        FfnStrategy::SwitchTop1,
        FfnStrategy::Lms,
        FfnStrategy::LmsFd,
    ];

    pub fn uses_lms(self) -> bool {
        matches!(self, FfnStrategy::Lms | FfnStrategy::LmsFd)
    }

    /// Whether the model has both a language-specific and a shared route.
    pub fn has_shared_route(self) -> bool {
        matches!(self, FfnStrategy::LmsFd | FfnStrategy::FullRankLs)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FfnStrategy::Dense => "dense",
            FfnStrategy::FullRankLs => "full_rank_ls",
            FfnStrategy::SwitchTop1 => "switch_top1",
            FfnStrategy::Lms => "lms",
            FfnStrategy::LmsFd => "lms_fd",
        }
    }
}

/// Which projections carry low-rank language factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    FfnOnly,
    AttnOnly,
    Both,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::FfnOnly, Placement::AttnOnly, Placement::Both];

    pub fn in_ffn(self) -> bool {
        matches!(self, Placement::FfnOnly | Placement::Both)
    }

    pub fn in_attention(self) -> bool {
        matches!(self, Placement::AttnOnly | Placement::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Model width `c`.
    pub embed_dim: usize,
    /// FFN hidden width `r`.
    pub ffn_dim: usize,
    /// Layers per side.
    pub n_layers: usize,
    pub n_heads: usize,
    pub languages: usize,
    pub ffn_strategy: FfnStrategy,
    pub lms_rank: usize,
    pub lms_mode: SynthesisMode,
    pub placement: Placement,
    pub n_experts: usize,
    pub balance_weight: f64,
    /// Keep base weights fixed and train only the added parameters.
    pub freeze_base: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            embed_dim: 64,
            ffn_dim: 128,
            n_layers: 2,
            n_heads: 2,
            languages: 4,
            ffn_strategy: FfnStrategy::Dense,
            lms_rank: 8,
            lms_mode: SynthesisMode::PairWise,
            placement: Placement::FfnOnly,
            n_experts: 4,
            balance_weight: 0.01,
            freeze_base: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Whether layer `i` (on either side) is a switch layer. Switch layers
    /// replace every second FFN, starting with the first.
    pub fn is_switch_layer(&self, i: usize) -> bool {
        self.ffn_strategy == FfnStrategy::SwitchTop1 && i.is_multiple_of(2)
    }

    pub fn lms_in_ffn(&self) -> bool {
        self.ffn_strategy.uses_lms() && self.placement.in_ffn()
    }

    pub fn lms_in_attention(&self) -> bool {
        self.ffn_strategy.uses_lms() && self.placement.in_attention()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.ffn_dim == 0 || self.n_heads == 0 {
            return fail("embed_dim, ffn_dim and n_heads must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.languages == 0 {
            return fail("languages must be at least 1".into());
        }
        if self.vocab_size < FIRST_TAG as usize + self.languages {
            return fail(format!(
                "vocab_size {} cannot hold the special tokens and {} language tags",
                self.vocab_size, self.languages
            ));
        }
        if !self.balance_weight.is_finite() || self.balance_weight < 0.0 {
            return fail(format!(
                "balance_weight {} must be finite and >= 0",
                self.balance_weight
            ));
        }
        if self.placement != Placement::FfnOnly && !self.ffn_strategy.uses_lms() {
            return fail(format!(
                "placement {:?} requires the lms or lms_fd strategy, not {}",
                self.placement,
                self.ffn_strategy.as_str()
            ));
        }
        if self.ffn_strategy == FfnStrategy::SwitchTop1 && self.n_experts == 0 {
            return fail("switch_top1 needs n_experts >= 1".into());
        }
        if self.ffn_strategy.uses_lms() {
            let d = self.lms_rank;
            if d == 0 {
                return fail("lms_rank must be at least 1".into());
            }
            if self.placement.in_ffn() && 2 * d > self.ffn_dim.min(self.embed_dim) {
                return fail(format!(
                    "lms_rank {d} exceeds min(ffn_dim, embed_dim)/2 = {}",
                    self.ffn_dim.min(self.embed_dim) / 2
                ));
            }
            if self.placement.in_attention() && 2 * d > self.embed_dim {
                return fail(format!(
                    "lms_rank {d} exceeds embed_dim/2 = {} for attention projections",
                    self.embed_dim / 2
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn switch_with_attention_placement_rejected() {
        let cfg = ModelConfig {
            ffn_strategy: FfnStrategy::SwitchTop1,
            placement: Placement::AttnOnly,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rank_bound() {
        let mut cfg = ModelConfig {
            ffn_strategy: FfnStrategy::Lms,
            embed_dim: 16,
            ffn_dim: 32,
            lms_rank: 8,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        cfg.lms_rank = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in FfnStrategy::ALL {
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.as_str()));
        }
    }
}
