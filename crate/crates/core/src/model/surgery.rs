use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{CatBertModel, ModelConfig};

/// Origin of one tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Fresh,
    Copied { source: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryRecord {
    /// Donor transformer indices, in the order they fill the new plan.
    pub keep: Vec<usize>,
    pub donor_transformers: usize,
}

/// Builds a model for `config` whose embeddings and transformers are
/// copied from `donor`: the new model's transformer `j` is the donor's
/// transformer `keep[j]`. Everything else is freshly initialized from
/// `seed`.
pub fn surgery_from_donor<T: Scalar>(
    donor: &CatBertModel<T>,
    config: &ModelConfig,
    keep: &[usize],
    seed: u64,
) -> Result<CatBertModel<T>> {
    let dc = donor.config();
    let available = dc.transformers();
    if let Some(&bad) = keep.iter().find(|&&k| k >= available) {
        return Err(Error::Config(format!(
            "keep index {bad} out of range for a donor with {available} transformers"
        )));
    }
    if keep.len() != config.transformers() {
        return Err(Error::Config(format!(
            "keep lists {} transformers but the plan has {}",
            keep.len(),
            config.transformers()
        )));
    }
    for (what, ours, theirs) in [
        ("hidden size", config.hidden, dc.hidden),
        ("ffn size", config.ffn, dc.ffn),
        ("head count", config.heads, dc.heads),
        ("vocabulary size", config.vocab_size, dc.vocab_size),
        ("position count", config.max_positions, dc.max_positions),
    ] {
        if ours != theirs {
            return Err(Error::Config(format!("donor {what} {theirs} differs from config {what} {ours}")));
        }
    }

    let mut model = CatBertModel::<T>::init_random(config, seed)?;
    for id in 0..model.params.len() {
        let name = model.params.get(id).name.clone();
        let source = if name.starts_with("embeddings.") {
            Some(name.clone())
        } else if let Some(rest) = name.strip_prefix("transformer.") {
            let (index, tail) = rest.split_once('.').expect("transformer parameter names have a tail");
            let j: usize = index.parse().expect("numeric transformer index");
            Some(format!("transformer.{}.{tail}", keep[j]))
        } else {
            None
        };
        if let Some(source) = source {
            let value = donor
                .param(&source)
                .ok_or_else(|| Error::Checkpoint(format!("donor lacks tensor {source}")))?;
            model.params.get_mut(id).value = value.clone();
            model.provenance[id] = Provenance::Copied { source };
        }
    }
    model.surgery = Some(SurgeryRecord {
        keep: keep.to_vec(),
        donor_transformers: available,
    });
    Ok(model)
}
