use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pretrain::NUM_SPECIALS;

/// Architecture variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Binary encoder, direct binarization; finetuned without binary pretraining.
    Baseline,
    /// Binary encoder, direct binarization, binary pretraining.
    BipftA,
    /// `BipftA` plus low-rank residual-polynomial estimators in attention.
    BipftB,
    /// Full-precision encoder of identical shape; used as distillation teacher.
    Fp,
}

impl Variant {
    pub fn has_estimators(self) -> bool {
        self == Variant::BipftB
    }

    pub fn is_binary(self) -> bool {
        self != Variant::Fp
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::BipftA => "bipft-a",
            Variant::BipftB => "bipft-b",
            Variant::Fp => "fp",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "baseline" => Ok(Variant::Baseline),
            "bipft-a" => Ok(Variant::BipftA),
            "bipft-b" => Ok(Variant::BipftB),
            "fp" | "full" => Ok(Variant::Fp),
            other => Err(Error::Config(vec![format!("unknown variant `{other}`")])),
        }
    }
}

/// Scale granularity of the weight binarizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerRow,
    PerTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub vocab: usize,
    pub variant: Variant,
    pub rank: usize,
    pub weight_granularity: Granularity,
    pub seed: u64,
    /// Query/key score estimator; only read for `BipftB`.
    pub kq_estimator: bool,
    /// Value-path estimator; only read for `BipftB`.
    pub attv_estimator: bool,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, C=64, 4 heads, FFN 128, seq 64.
    pub fn tiny(vocab: usize) -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn_dim: 128,
            max_seq: 64,
            vocab,
            variant: Variant::BipftA,
            rank: 1,
            weight_granularity: Granularity::PerRow,
            seed: 0,
            kq_estimator: true,
            attv_estimator: true,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
            dropout: 0.0,
        }
    }

    /// BERT-base shape at sequence length 128.
    pub fn base() -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn_dim: 3072,
            max_seq: 128,
            vocab: 30522,
            ..Self::tiny(30522)
        }
    }

    pub fn preset(name: &str, vocab: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(vocab)),
            "base" => Ok(Self::base()),
            other => Err(Error::Config(vec![format!(
                "unknown config preset `{other}` (expected tiny or base)"
            )])),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn kq_enabled(&self) -> bool {
        self.variant.has_estimators() && self.kq_estimator
    }

    pub fn attv_enabled(&self) -> bool {
        self.variant.has_estimators() && self.attv_estimator
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.hidden == 0 {
            errs.push("hidden must be > 0".to_string());
        }
        if self.heads == 0 {
            errs.push("heads must be > 0".to_string());
        } else if self.hidden % self.heads != 0 {
            errs.push(format!(
                "hidden ({}) not divisible by heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.ffn_dim == 0 {
            errs.push("ffn_dim must be > 0".to_string());
        }
        if self.vocab < NUM_SPECIALS {
            errs.push(format!(
                "vocab ({}) must be >= {NUM_SPECIALS} (reserved specials)",
                self.vocab
            ));
        }
        if self.max_seq < 3 {
            errs.push(format!("max_seq ({}) must be >= 3", self.max_seq));
        }
        if self.variant == Variant::BipftB && self.rank == 0 {
            errs.push("bipft-b requires rank >= 1".to_string());
        }
        if !(self.layer_norm_eps > 0.0) {
            errs.push("layer_norm_eps must be > 0".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout ({}) must be in [0, 1)", self.dropout));
        }
        if !(self.init_std >= 0.0) {
            errs.push("init_std must be >= 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
