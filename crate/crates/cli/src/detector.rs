use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use catbert_core::eval::{CatBertScorer, TextScorer};
use catbert_core::mail::{build_content, EmailRecord};
use catbert_core::model::load_checkpoint;
use catbert_core::tokenizer::Vocabulary;
use catbert_core::train::{prepare_examples, score_examples, PrepareOptions, TfidfLr};
use catbert_core::Model;
use serde::{Deserialize, Serialize};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const PIPELINE_FILE: &str = "pipeline.json";
pub const LR_FILE: &str = "tfidf_lr.json";

/// Preprocessing a checkpoint was trained with.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pipeline {
    pub prepare: PrepareOptions,
}

impl Pipeline {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PIPELINE_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(PIPELINE_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// A trained detector loaded from a model directory.
pub enum Detector {
    CatBert {
        model: Box<Model>,
        vocab: Vocabulary,
        pipeline: Pipeline,
    },
    Lr(TfidfLr),
}

impl Detector {
    /// Files the detector was read from.
    pub fn load(dir: &Path, vocab: Option<&Path>) -> Result<(Self, Vec<PathBuf>)> {
        let lr = dir.join(LR_FILE);
        if lr.exists() {
            return Ok((Self::Lr(TfidfLr::load(&lr)?), vec![lr]));
        }
        let vocab_path = vocab.map_or_else(|| dir.join(VOCAB_FILE), Path::to_path_buf);
        if !vocab_path.exists() {
            bail!(
                "no vocabulary: pass --vocab or place {VOCAB_FILE} in {}",
                dir.display()
            );
        }
        let vocab = Vocabulary::load(&vocab_path)?;
        let model: Model = load_checkpoint(dir)?;
        if model.config().vocab_size != vocab.len() {
            bail!(
                "model expects {} tokens but {} has {}",
                model.config().vocab_size,
                vocab_path.display(),
                vocab.len()
            );
        }
        let pipeline = Pipeline::load(dir)?;
        Ok((
            Self::CatBert {
                model: Box::new(model),
                vocab,
                pipeline,
            },
            vec![dir.to_path_buf(), vocab_path],
        ))
    }

    pub fn score(&self, records: &[EmailRecord], batch_size: usize) -> Result<Vec<f64>> {
        Ok(match self {
            Self::CatBert { model, vocab, pipeline } => {
                let examples = prepare_examples(records, vocab, &pipeline.prepare)?;
                score_examples(model.as_ref(), &examples, batch_size)?
            }
            Self::Lr(lr) => records.iter().map(|r| lr.predict(&build_content(r))).collect(),
        })
    }

    pub fn with_scorer<R>(&self, batch_size: usize, f: impl FnOnce(&dyn TextScorer) -> R) -> R {
        match self {
            Self::CatBert { model, vocab, pipeline } => f(&CatBertScorer {
                model: model.as_ref(),
                vocab,
                options: pipeline.prepare,
                batch_size,
            }),
            Self::Lr(lr) => f(lr),
        }
    }
}
