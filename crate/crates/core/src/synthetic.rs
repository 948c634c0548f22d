//! Seeded toy corpora in which maliciousness is tied to a planted
//! compound word, optionally combined with the external-sender flag.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mail::{EmailRecord, Group};
use crate::tokenizer::{Vocabulary, CLS, CONTINUATION, PAD, SEP, UNK};

const WORDS: &[&str] = &[
    "meeting", "report", "schedule", "lunch", "project", "update", "team", "review", "budget", "notes", "draft",
    "agenda", "office", "call", "plan", "quarter", "client", "invoice", "design", "summary", "session", "thanks",
    "please", "attached", "see", "the", "for", "our", "next", "week", "today", "tomorrow", "friday", "monday",
    "about", "with", "and", "from", "your", "this", "new", "final", "shared", "folder", "document", "slides",
    "feedback", "question", "reminder", "status", "training", "holiday", "party", "coffee", "room", "booked",
    "wire", "bank", "funds", "cash", "account", "payment", "hello", "regards", "best", "kind",
];

const SUBJECT_WORDS: &[&str] = &[
    "meeting", "report", "update", "reminder", "question", "status", "invoice", "lunch", "agenda", "review",
    "feedback", "notes", "plan", "draft",
];

/// Sub-word pieces that let compounds split into shared parts.
const PIECES: &[&str] = &["wire", "bank", "funds", "cash", "##transfer", "##trans", "##fer"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub records: usize,
    pub malicious_fraction: f64,
    /// Malicious additionally requires an external sender; some benign
    /// internal messages carry the planted word as decoys.
    pub context_dependent: bool,
    /// Share of benign messages that are decoys in the context variant.
    pub decoy_fraction: f64,
    pub planted: Vec<String>,
    /// Unseen compounds sharing the planted words' tail piece.
    pub replacements: Vec<String>,
    pub bec_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            records: 2000,
            malicious_fraction: 0.1,
            context_dependent: false,
            decoy_fraction: 0.3,
            planted: vec!["wiretransfer".into(), "banktransfer".into()],
            replacements: vec!["fundstransfer".into(), "cashtransfer".into()],
            bec_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<EmailRecord>,
    pub vocabulary: Vocabulary,
    /// Planted words mapped to their unseen replacements, plus a few
    /// ordinary word pairs.
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub planted: Vec<String>,
}

/// Vocabulary covering every corpus word, single characters with their
/// continuations, and the compound pieces, but not the compounds.
pub fn synthetic_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    tokens.extend("!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~".chars().map(String::from));
    for c in ('a'..='z').chain('0'..='9') {
        tokens.push(c.to_string());
        tokens.push(format!("{CONTINUATION}{c}"));
    }
    for w in WORDS.iter().chain(PIECES) {
        if !tokens.iter().any(|t| t == w) {
            tokens.push(w.to_string());
        }
    }
    Vocabulary::from_tokens(tokens).expect("synthetic vocabulary is well formed")
}

fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<String> {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| WORDS.choose(rng).expect("non-empty").to_string()).collect()
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if !(0.0..=1.0).contains(&config.malicious_fraction) || config.planted.is_empty() {
        return Err(Error::Config("malicious fraction must lie in [0, 1] with at least one planted word".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_mal = (config.records as f64 * config.malicious_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..config.records).map(|i| u8::from(i < n_mal)).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let start = DateTime::from_timestamp(1_600_000_000, 0).expect("valid timestamp");
    let mut t = start;
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            t += Duration::seconds(rng.random_range(60..7200));
            let (planted, external) = match (label, config.context_dependent) {
                (1, true) => (true, true),
                (1, false) => (true, rng.random_bool(0.5)),
                (_, true) if rng.random_bool(config.decoy_fraction) => (true, false),
                _ => (false, rng.random_bool(0.5)),
            };
            let mut body = sentence(&mut rng, 6, 14);
            if planted {
                let word = config.planted.choose(&mut rng).expect("non-empty").clone();
                let at = rng.random_range(0..=body.len());
                body.insert(at, word);
            }
            let subject: Vec<String> = (0..rng.random_range(2..=4))
                .map(|_| SUBJECT_WORDS.choose(&mut rng).expect("non-empty").to_string())
                .collect();
            let from = if external { "alex@partner-mail.net" } else { "sam@acme.com" };
            let n_to = rng.random_range(1..=3);
            let n_cc = rng.random_range(0..=2);
            let group = if label == 1 && rng.random_bool(config.bec_fraction) {
                Group::Bec
            } else {
                Group::English
            };
            EmailRecord {
                id: Some(format!("m{i:05}")),
                subject: subject.join(" "),
                body_text: Some(format!("{}.", body.join(" "))),
                body_html: None,
                from_addr: from.into(),
                to_addrs: (0..n_to).map(|k| format!("user{k}@acme.com")).collect(),
                cc_addrs: (0..n_cc).map(|k| format!("cc{k}@acme.com")).collect(),
                label,
                group: Some(group),
                weight: None,
                first_seen: Some(t),
            }
        })
        .collect();

    let mut synonyms: BTreeMap<String, Vec<String>> = config
        .planted
        .iter()
        .map(|p| (p.clone(), config.replacements.clone()))
        .collect();
    for (a, b) in [("meeting", "session"), ("report", "summary"), ("thanks", "regards")] {
        synonyms.insert(a.into(), vec![b.into()]);
    }
    Ok(SyntheticCorpus {
        records,
        vocabulary: synthetic_vocabulary(),
        synonyms,
        planted: config.planted.clone(),
    })
}
