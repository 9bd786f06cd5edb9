use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit-widths are drawn from this set; 32 disables quantization.
pub const ALLOWED_BITS: [u32; 5] = [2, 4, 6, 8, 32];

/// The W-E-A bit triple: Transformer weights, word embedding, activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct BitConfig {
    pub weight: u32,
    pub embedding: u32,
    pub activation: u32,
}

impl BitConfig {
    pub const FULL_PRECISION: BitConfig = BitConfig::new(32, 32, 32);

    pub const fn new(weight: u32, embedding: u32, activation: u32) -> Self {
        Self {
            weight,
            embedding,
            activation,
        }
    }

    pub fn is_full_precision(&self) -> bool {
        *self == Self::FULL_PRECISION
    }

    pub fn validate(&self) -> Result<()> {
        for b in [self.weight, self.embedding, self.activation] {
            if !ALLOWED_BITS.contains(&b) {
                return Err(Error::Config(format!(
                    "bit-width {b} not in {ALLOWED_BITS:?}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for BitConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.weight, self.embedding, self.activation)
    }
}

impl From<BitConfig> for String {
    fn from(b: BitConfig) -> String {
        b.to_string()
    }
}

impl TryFrom<String> for BitConfig {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for BitConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        let bad = || Error::Config(format!("bit config `{s}` is not of the form W-E-A"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<u32> = parts
            .iter()
            .map(|p| p.trim().parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let bits = BitConfig::new(nums[0], nums[1], nums[2]);
        bits.validate()?;
        Ok(bits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub num_classes: usize,
    pub bits: BitConfig,
    /// Scale attention logits by `1/sqrt(d/heads)` instead of `1/sqrt(d)`.
    pub scale_by_head_dim: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn: 64,
            vocab: 64,
            max_seq: 16,
            num_classes: 2,
            bits: BitConfig::FULL_PRECISION,
            scale_by_head_dim: false,
            layer_norm_eps: 1e-12,
        }
    }

    /// BERT-base dimensions, used for size accounting.
    pub fn bert_base() -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            vocab: 30522,
            max_seq: 512,
            num_classes: 2,
            ..Self::toy()
        }
    }

    pub fn with_bits(mut self, bits: BitConfig) -> Self {
        self.bits = bits;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn attention_scale(&self) -> f64 {
        let denom = if self.scale_by_head_dim {
            self.head_dim()
        } else {
            self.hidden
        };
        1.0 / (denom as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        self.bits.validate()
    }
}
