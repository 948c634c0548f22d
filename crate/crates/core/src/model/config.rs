use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[serde(alias = "T")]
    Transformer,
    #[serde(alias = "A")]
    Adapter,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Transformer => "T",
            BlockKind::Adapter => "A",
        })
    }
}

/// Where the classifier reads the `[CLS]` hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsReadout {
    /// After the final block of the plan, whatever its kind.
    #[default]
    LastBlock,
    /// After the final transformer, skipping any trailing adapters.
    LastTransformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub plan: Vec<BlockKind>,
    pub context_dim: usize,
    /// Width of the fusion layer; `None` means `hidden`.
    pub classifier_hidden: Option<usize>,
    pub cls_readout: ClsReadout,
    /// Start every adapter as the identity map.
    pub zero_adapter_output: bool,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::catbert()
    }
}

/// Parses a plan written as `T,A,T` or `TATA`.
pub fn parse_plan(s: &str) -> Result<Vec<BlockKind>> {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c.to_ascii_uppercase() {
            'T' => Ok(BlockKind::Transformer),
            'A' => Ok(BlockKind::Adapter),
            other => Err(Error::Config(format!("unknown block kind {other:?} in plan {s:?}"))),
        })
        .collect()
}

pub fn format_plan(plan: &[BlockKind]) -> String {
    plan.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Three transformers interleaved with three adapters at multilingual
    /// BERT-base width.
    pub fn catbert() -> Self {
        use BlockKind::*;
        Self {
            vocab_size: 119_547,
            hidden: 768,
            ffn: 3072,
            heads: 12,
            max_positions: 512,
            plan: vec![Transformer, Adapter, Transformer, Adapter, Transformer, Adapter],
            context_dim: 4,
            classifier_hidden: None,
            cls_readout: ClsReadout::LastBlock,
            zero_adapter_output: false,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// Six transformers and a content-only head.
    pub fn distilbert() -> Self {
        Self {
            plan: vec![BlockKind::Transformer; 6],
            context_dim: 0,
            ..Self::catbert()
        }
    }

    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 16,
            ffn: 32,
            heads: 2,
            max_positions: 64,
            plan: vec![BlockKind::Transformer, BlockKind::Adapter],
            ..Self::catbert()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "catbert" => Ok(Self::catbert()),
            "distilbert" => Ok(Self::distilbert()),
            "tiny" => Ok(Self::tiny(1000)),
            other => Err(Error::Config(format!(
                "unknown model preset {other:?} (known: catbert, distilbert, tiny)"
            ))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn classifier_dim(&self) -> usize {
        self.classifier_hidden.unwrap_or(self.hidden)
    }

    pub fn transformers(&self) -> usize {
        self.plan.iter().filter(|b| **b == BlockKind::Transformer).count()
    }

    pub fn adapters(&self) -> usize {
        self.plan.iter().filter(|b| **b == BlockKind::Adapter).count()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("heads", self.heads),
            ("max_positions", self.max_positions),
            ("classifier_hidden", self.classifier_dim()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std must be positive, got {}", self.init_std)));
        }
        Ok(())
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(s)?;
        config.validate()?;
        Ok(config)
    }
}
