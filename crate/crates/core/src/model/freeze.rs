use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{CatBertModel, ModelConfig};

pub const PARTIAL_FINETUNE: &str = "partial-finetune";

/// Parameter-name prefixes to hold fixed during training.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub prefixes: Vec<String>,
}

fn matches(name: &str, prefix: &str) -> bool {
    name == prefix || name.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('.'))
}

impl FreezeMask {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(prefixes: I) -> Self {
        Self {
            prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    /// `partial-finetune` freezes the embeddings and the two lowest
    /// transformers; `none` freezes nothing.
    pub fn preset(name: &str, config: &ModelConfig) -> Result<Self> {
        match name {
            "none" | "" => Ok(Self::default()),
            PARTIAL_FINETUNE => {
                let lower = config.transformers().min(2);
                let mut prefixes = vec!["embeddings".to_string()];
                prefixes.extend((0..lower).map(|i| format!("transformer.{i}")));
                Ok(Self { prefixes })
            }
            other => Err(Error::Config(format!(
                "unknown freeze preset {other:?} (known: none, {PARTIAL_FINETUNE})"
            ))),
        }
    }

    /// Drops a prefix, e.g. to train the embeddings under a preset.
    pub fn without(mut self, prefix: &str) -> Self {
        self.prefixes.retain(|p| p != prefix);
        self
    }

    pub fn freezes(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| matches(name, p))
    }
}

/// Block-level prefixes that a mask may name for `config`.
pub fn known_prefixes(config: &ModelConfig) -> Vec<String> {
    let mut out = vec!["embeddings".to_string()];
    out.extend((0..config.transformers()).map(|i| format!("transformer.{i}")));
    out.extend((0..config.adapters()).map(|i| format!("adapter.{i}")));
    out.push("classifier".into());
    out
}

/// Marks every parameter trainable except those under the mask. Returns
/// the frozen names.
pub fn set_trainable<T: Scalar>(model: &mut CatBertModel<T>, mask: &FreezeMask) -> Result<Vec<String>> {
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let unresolved: Vec<&String> = mask
        .prefixes
        .iter()
        .filter(|prefix| !names.iter().any(|n| matches(n, prefix)))
        .collect();
    if !unresolved.is_empty() {
        return Err(Error::Config(format!(
            "freeze prefixes {unresolved:?} match no parameter; known prefixes: {}",
            known_prefixes(model.config()).join(", ")
        )));
    }
    let mut frozen = BTreeSet::new();
    for p in model.params_mut().iter_mut() {
        p.trainable = !mask.freezes(&p.name);
        if !p.trainable {
            frozen.insert(p.name.clone());
        }
    }
    Ok(frozen.into_iter().collect())
}
