use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcodec::{DEFAULT_SUBREDDIT_CAPACITY, HOURS_PER_DAY};

/// Which action features feed the embedding: text (always), publication
/// time (P) and subreddit (S). Serialized as `"T"`, `"TP"`, `"TS"` or `"TPS"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Features {
    pub time: bool,
    pub subreddit: bool,
}

impl Features {
    pub const T: Features = Features {
        time: false,
        subreddit: false,
    };
    pub const TP: Features = Features {
        time: true,
        subreddit: false,
    };
    pub const TPS: Features = Features {
        time: true,
        subreddit: true,
    };
}

impl fmt::Display for Features {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("T")?;
        if self.time {
            f.write_str("P")?;
        }
        if self.subreddit {
            f.write_str("S")?;
        }
        Ok(())
    }
}

impl From<Features> for String {
    fn from(f: Features) -> String {
        f.to_string()
    }
}

impl TryFrom<String> for Features {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "T" => Ok(Features::T),
            "TP" => Ok(Features::TP),
            "TS" => Ok(Features {
                time: false,
                subreddit: true,
            }),
            "TPS" => Ok(Features::TPS),
            other => Err(format!(
                "unknown feature set {other:?}; expected T, TP, TS or TPS"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Real token ids are `0..vocab_size`; `vocab_size` itself is padding.
    pub vocab_size: usize,
    /// Tokens per document.
    pub seq_len: usize,
    pub token_dim: usize,
    pub conv_widths: Vec<usize>,
    pub filters_per_width: usize,
    /// Number of subreddit ids, including the out-of-vocabulary id.
    pub subreddit_vocab_size: usize,
    pub subreddit_dim: usize,
    pub attention_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub features: Features,
    pub normalize_output: bool,
    pub hidden_activation: Activation,
}

impl ModelConfig {
    /// Full-size shapes: 2^16 subwords, 32 tokens, 512-dim embeddings and
    /// filters, 512-dim attention and 1024-dim output.
    pub fn full(features: Features) -> Self {
        Self {
            vocab_size: 1 << 16,
            seq_len: 32,
            token_dim: 512,
            conv_widths: vec![2, 3, 4],
            filters_per_width: 512,
            subreddit_vocab_size: DEFAULT_SUBREDDIT_CAPACITY + 1,
            subreddit_dim: 512,
            attention_dim: 512,
            hidden_dim: 1024,
            output_dim: 1024,
            features,
            normalize_output: true,
            hidden_activation: Activation::Relu,
        }
    }

    /// A very small model for tests and gradient checks.
    pub fn tiny(features: Features) -> Self {
        Self {
            vocab_size: 64,
            seq_len: 8,
            token_dim: 8,
            conv_widths: vec![2, 3, 4],
            filters_per_width: 4,
            subreddit_vocab_size: 9,
            subreddit_dim: 8,
            attention_dim: 8,
            hidden_dim: 8,
            output_dim: 8,
            features,
            normalize_output: true,
            hidden_activation: Activation::Relu,
        }
    }

    pub fn text_dim(&self) -> usize {
        self.conv_widths.len() * self.filters_per_width
    }

    /// Width of the per-action vector entering attention.
    pub fn action_dim(&self) -> usize {
        let mut d = self.text_dim();
        if self.features.subreddit {
            d += self.subreddit_dim;
        }
        if self.features.time {
            d += HOURS_PER_DAY;
        }
        d
    }

    pub fn pad_id(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("token_dim", self.token_dim),
            ("filters_per_width", self.filters_per_width),
            ("attention_dim", self.attention_dim),
            ("hidden_dim", self.hidden_dim),
            ("output_dim", self.output_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|d| d.1 == 0) {
            return Err(Error::Config(format!(
                "model dimension {name} must be positive"
            )));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::Config(
                "convolution widths must be non-empty and positive".into(),
            ));
        }
        if self.features.subreddit && (self.subreddit_dim == 0 || self.subreddit_vocab_size == 0) {
            return Err(Error::Config(
                "subreddit feature needs positive dimensions".into(),
            ));
        }
        Ok(())
    }
}
