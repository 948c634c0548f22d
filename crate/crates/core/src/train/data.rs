use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mail::{build_content, extract_context, EmailRecord, Group, CONTEXT_DIM};
use crate::model::{CatBertModel, ModelInput};
use crate::scalar::Scalar;
use crate::tokenizer::{encode_text, EncodeOptions, TokenSequence, Vocabulary};

/// A record reduced to model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: Option<String>,
    pub sequence: TokenSequence,
    pub context: [f64; CONTEXT_DIM],
    pub label: u8,
    pub weight: f32,
    pub group: Option<Group>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareOptions {
    pub encode: EncodeOptions,
    /// Weight of `bec` records that carry no explicit weight.
    pub bec_weight: f32,
    /// Replace every context vector by zeros.
    pub zero_context: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            encode: EncodeOptions::default(),
            bec_weight: 100.0,
            zero_context: false,
        }
    }
}

pub fn prepare_example(record: &EmailRecord, vocab: &Vocabulary, opts: &PrepareOptions) -> Result<Example> {
    let sequence = encode_text(&build_content(record), vocab, opts.encode)?;
    let (features, warning) = extract_context(record);
    if let Some(w) = warning {
        log::debug!("record {}: {}", record.id.as_deref().unwrap_or("?"), w.0);
    }
    let context = if opts.zero_context {
        [0.0; CONTEXT_DIM]
    } else {
        features.to_vector()
    };
    let weight = match (record.weight, &record.group) {
        (Some(w), _) => w,
        (None, Some(Group::Bec)) => opts.bec_weight,
        (None, _) => 1.0,
    };
    Ok(Example {
        id: record.id.clone(),
        sequence,
        context,
        label: record.label,
        weight,
        group: record.group.clone(),
    })
}

/// Tokenizes and featurizes records in parallel; output order follows input.
pub fn prepare_examples(records: &[EmailRecord], vocab: &Vocabulary, opts: &PrepareOptions) -> Result<Vec<Example>> {
    records.par_iter().map(|r| prepare_example(r, vocab, opts)).collect()
}

/// Stacks examples into one model batch.
pub fn batch_input(examples: &[&Example], context_dim: usize) -> Result<ModelInput> {
    let context = match context_dim {
        0 => Vec::new(),
        CONTEXT_DIM => examples.iter().flat_map(|e| e.context).collect(),
        other => {
            return Err(Error::Config(format!(
                "models read {CONTEXT_DIM} or 0 context features, config has {other}"
            )))
        }
    };
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.sequence).collect();
    ModelInput::from_sequences(&seqs, context)
}

/// Probabilities for every example, scored in chunks of `batch_size`
/// across the rayon pool.
pub fn score_examples<T: Scalar>(model: &CatBertModel<T>, examples: &[Example], batch_size: usize) -> Result<Vec<f64>> {
    let batch_size = batch_size.max(1);
    let chunks: Vec<Vec<f64>> = examples
        .par_chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Example> = chunk.iter().collect();
            model.predict(&batch_input(&refs, model.config().context_dim)?)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "hi", "pay"]).unwrap()
    }

    #[test]
    fn bec_weight_applies_only_without_explicit_weight() {
        let mut r = EmailRecord {
            subject: "hi".into(),
            from_addr: "a@x.com".into(),
            to_addrs: vec!["b@x.com".into()],
            group: Some(Group::Bec),
            label: 1,
            ..Default::default()
        };
        let opts = PrepareOptions::default();
        assert_eq!(prepare_example(&r, &vocab(), &opts).unwrap().weight, 100.0);
        r.weight = Some(3.0);
        assert_eq!(prepare_example(&r, &vocab(), &opts).unwrap().weight, 3.0);
        r.group = None;
        r.weight = None;
        let e = prepare_example(&r, &vocab(), &opts).unwrap();
        assert_eq!(e.weight, 1.0);
        assert_eq!(e.context[0], 1.0);
    }

    #[test]
    fn zero_context_option() {
        let r = EmailRecord {
            subject: "pay".into(),
            from_addr: "a@x.com".into(),
            to_addrs: vec!["b@y.com".into(), "c@y.com".into()],
            label: 1,
            ..Default::default()
        };
        let opts = PrepareOptions {
            zero_context: true,
            ..Default::default()
        };
        assert_eq!(prepare_example(&r, &vocab(), &opts).unwrap().context, [0.0; 4]);
        let e = prepare_example(&r, &vocab(), &PrepareOptions::default()).unwrap();
        assert_eq!(e.context[1], 1.0);
        assert!((e.context[2] - 3f64.ln()).abs() < 1e-12);
    }
}
