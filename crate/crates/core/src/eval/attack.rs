use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mail::{build_content, EmailRecord};
use crate::model::CatBertModel;
use crate::scalar::Scalar;
use crate::tokenizer::{encode_text, Vocabulary};
use crate::train::{score_examples, Example, PrepareOptions, TfidfLr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Synonym,
    Typo,
    Homoglyph,
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synonym" => Ok(Self::Synonym),
            "typo" => Ok(Self::Typo),
            "homoglyph" => Ok(Self::Homoglyph),
            other => Err(Error::Config(format!(
                "unknown attack {other:?} (known: synonym, typo, homoglyph)"
            ))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Synonym => "synonym",
            Self::Typo => "typo",
            Self::Homoglyph => "homoglyph",
        })
    }
}

pub fn default_homoglyphs() -> BTreeMap<char, char> {
    [('a', '@'), ('o', '0'), ('i', '1'), ('e', '3'), ('s', '$'), ('l', '1')]
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Probability that each word is selected.
    pub rate: f64,
    pub seed: u64,
    /// Lower-case word to replacements.
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub homoglyphs: BTreeMap<char, char>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::Typo,
            rate: 0.5,
            seed: 0,
            synonyms: BTreeMap::new(),
            homoglyphs: default_homoglyphs(),
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("attack rate {} must lie in [0, 1]", self.rate)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Splits a word into leading punctuation, alphanumeric core, and trailing
/// punctuation.
fn split_core(word: &str) -> (&str, &str, &str) {
    let start = word.find(char::is_alphanumeric).unwrap_or(word.len());
    let end = word.rfind(char::is_alphanumeric).map_or(start, |i| i + word[i..].chars().next().map_or(1, char::len_utf8));
    (&word[..start], &word[start..end], &word[end..])
}

fn match_case(replacement: &str, original: &str) -> String {
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut c = replacement.chars();
        c.next()
            .map(|f| f.to_uppercase().chain(c).collect())
            .unwrap_or_default()
    } else {
        replacement.to_string()
    }
}

fn typo(core: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = core.chars().collect();
    let n = chars.len();
    let swaps: Vec<usize> = (0..n.saturating_sub(1)).filter(|&i| chars[i] != chars[i + 1]).collect();
    let mut kind = rng.random_range(0..3);
    if kind == 0 && swaps.is_empty() {
        kind = 1;
    }
    if kind == 1 && n < 2 {
        kind = 2;
    }
    match kind {
        0 => {
            let i = swaps[rng.random_range(0..swaps.len())];
            chars.swap(i, i + 1);
        }
        1 => {
            chars.remove(rng.random_range(0..n));
        }
        _ => {
            let i = rng.random_range(0..n);
            chars.insert(i, chars[i]);
        }
    }
    chars.into_iter().collect()
}

/// Perturbs words of `text` chosen by a seeded draw per word. Whitespace
/// and surrounding punctuation are kept as they are.
pub fn attack(text: &str, spec: &AttackSpec) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = String::with_capacity(text.len() + 8);
    let mut rest = text;
    while !rest.is_empty() {
        let ws = rest.find(|c: char| !c.is_whitespace()).unwrap_or(rest.len());
        out.push_str(&rest[..ws]);
        rest = &rest[ws..];
        if rest.is_empty() {
            break;
        }
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        let word = &rest[..end];
        rest = &rest[end..];
        let selected = rng.random::<f64>() < spec.rate;
        let (lead, core, trail) = split_core(word);
        let replaced = if !selected || core.is_empty() {
            None
        } else {
            match spec.kind {
                AttackKind::Synonym => spec.synonyms.get(&core.to_lowercase()).and_then(|options| {
                    (!options.is_empty()).then(|| match_case(&options[rng.random_range(0..options.len())], core))
                }),
                AttackKind::Typo => Some(typo(core, &mut rng)),
                AttackKind::Homoglyph => Some(
                    core.chars()
                        .map(|c| {
                            spec.homoglyphs
                                .get(&c)
                                .or_else(|| spec.homoglyphs.get(&c.to_ascii_lowercase()))
                                .copied()
                                .unwrap_or(c)
                        })
                        .collect(),
                ),
            }
        };
        match replaced {
            Some(core) => {
                out.push_str(lead);
                out.push_str(&core);
                out.push_str(trail);
            }
            None => out.push_str(word),
        }
    }
    out
}

/// Anything that maps message content to a maliciousness probability.
/// `records` supplies the headers for context features.
pub trait TextScorer {
    fn score_texts(&self, texts: &[String], records: &[EmailRecord]) -> Result<Vec<f64>>;
}

pub struct CatBertScorer<'m, T> {
    pub model: &'m CatBertModel<T>,
    pub vocab: &'m Vocabulary,
    pub options: PrepareOptions,
    pub batch_size: usize,
}

impl<T: Scalar> TextScorer for CatBertScorer<'_, T> {
    fn score_texts(&self, texts: &[String], records: &[EmailRecord]) -> Result<Vec<f64>> {
        let examples: Vec<Example> = texts
            .iter()
            .zip(records)
            .map(|(text, record)| {
                let mut e = crate::train::prepare_example(record, self.vocab, &self.options)?;
                e.sequence = encode_text(text, self.vocab, self.options.encode)?;
                Ok(e)
            })
            .collect::<Result<_>>()?;
        score_examples(self.model, &examples, self.batch_size)
    }
}

impl TextScorer for TfidfLr {
    fn score_texts(&self, texts: &[String], _records: &[EmailRecord]) -> Result<Vec<f64>> {
        Ok(texts.iter().map(|t| self.predict(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub rate: f64,
    pub seed: u64,
    pub threshold: f64,
    pub samples: usize,
    pub clean_acc: f64,
    pub attacked_acc: f64,
    /// `clean_acc - attacked_acc`.
    pub delta: f64,
}

/// Attacked texts for every malicious record; record `i` of the subset is
/// attacked with seed `spec.seed + i`.
pub fn attack_records(records: &[EmailRecord], spec: &AttackSpec) -> Vec<(EmailRecord, String, String)> {
    records
        .iter()
        .filter(|r| r.label == 1)
        .enumerate()
        .map(|(i, r)| {
            let clean = build_content(r);
            let attacked = attack(&clean, &spec.with_seed(spec.seed.wrapping_add(i as u64)));
            (r.clone(), clean, attacked)
        })
        .collect()
}

/// Detection accuracy on the malicious records before and after
/// perturbing their content. Headers are left untouched.
pub fn accuracy_under_attack(
    scorer: &dyn TextScorer,
    records: &[EmailRecord],
    spec: &AttackSpec,
    threshold: f64,
) -> Result<AttackReport> {
    spec.validate()?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let triples = attack_records(records, spec);
    if triples.is_empty() {
        return Err(Error::Dataset("no malicious records to attack".into()));
    }
    let rs: Vec<EmailRecord> = triples.iter().map(|t| t.0.clone()).collect();
    let clean: Vec<String> = triples.iter().map(|t| t.1.clone()).collect();
    let attacked: Vec<String> = triples.iter().map(|t| t.2.clone()).collect();
    let acc = |scores: Vec<f64>| scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64;
    let clean_acc = acc(scorer.score_texts(&clean, &rs)?);
    let attacked_acc = if clean == attacked {
        clean_acc
    } else {
        acc(scorer.score_texts(&attacked, &rs)?)
    };
    Ok(AttackReport {
        kind: spec.kind,
        rate: spec.rate,
        seed: spec.seed,
        threshold,
        samples: rs.len(),
        clean_acc,
        attacked_acc,
        delta: clean_acc - attacked_acc,
    })
}
