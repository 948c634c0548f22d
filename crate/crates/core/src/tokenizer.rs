//! WordPiece tokenization with `[CLS] ... [SEP]` framing.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const CONTINUATION: &str = "##";

/// Words longer than this many characters become `[UNK]` outright.
const MAX_WORD_CHARS: usize = 100;

/// Token list where each token's id is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    pad: usize,
    unk: usize,
    cls: usize,
    sep: usize,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if let Some(prev) = ids.insert(t.clone(), i) {
                return Err(Error::Vocab(format!(
                    "duplicate token {t:?} on lines {} and {}",
                    prev + 1,
                    i + 1
                )));
            }
        }
        let missing: Vec<&str> = [PAD, UNK, CLS, SEP]
            .into_iter()
            .filter(|s| !ids.contains_key(*s))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Vocab(format!("missing special tokens: {}", missing.join(", "))));
        }
        Ok(Self {
            pad: ids[PAD],
            unk: ids[UNK],
            cls: ids[CLS],
            sep: ids[SEP],
            tokens,
            ids,
        })
    }

    /// Reads a UTF-8 file with one token per line; line index is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r')))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep
    }
}

/// Which tokens survive when content exceeds the length budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    /// Keep the first tokens.
    #[default]
    Head,
    /// Keep the last tokens.
    Tail,
}

impl FromStr for Truncation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Self::Head),
            "tail" => Ok(Self::Tail),
            other => Err(Error::Config(format!("unknown truncation {other:?}, expected head|tail"))),
        }
    }
}

impl fmt::Display for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Head => "head",
            Self::Tail => "tail",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeOptions {
    pub max_len: usize,
    pub truncation: Truncation,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            max_len: 128,
            truncation: Truncation::Head,
        }
    }
}

/// A framed, padded id sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    /// Content tokens before truncation, excluding `[CLS]`/`[SEP]`.
    pub original_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions holding real (non-pad) tokens.
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Positions `1..active_len - 1`, i.e. everything between the frame.
    pub fn content_range(&self) -> std::ops::Range<usize> {
        1..self.active_len().saturating_sub(1).max(1)
    }
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases, then splits on whitespace and around every punctuation
/// character (each punctuation character is its own word).
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match-first split of one pre-tokenized word.
fn split_word(word: &str, vocab: &Vocabulary, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        out.push(UNK.to_string());
        return;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let body: String = chars[start..end].iter().collect();
            let candidate = if start > 0 {
                format!("{CONTINUATION}{body}")
            } else {
                body
            };
            if vocab.id(&candidate).is_some() {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => {
                out.push(UNK.to_string());
                return;
            }
        }
    }
    out.extend(pieces);
}

/// Splits text into WordPiece tokens. Total: unknown words map to `[UNK]`.
pub fn wordpiece(text: &str, vocab: &Vocabulary) -> Vec<String> {
    let mut out = Vec::new();
    for word in pre_tokenize(text) {
        split_word(&word, vocab, &mut out);
    }
    out
}

/// Tokenizes `text` and frames it as `[CLS] content [SEP] [PAD]...`.
pub fn encode_text(text: &str, vocab: &Vocabulary, opts: EncodeOptions) -> Result<TokenSequence> {
    if opts.max_len < 3 {
        return Err(Error::contract(format!("max_len must be at least 3, got {}", opts.max_len)));
    }
    let content: Vec<usize> = wordpiece(text, vocab)
        .iter()
        .map(|t| vocab.id(t).unwrap_or(vocab.unk_id()))
        .collect();
    let budget = opts.max_len - 2;
    let kept = if content.len() <= budget {
        &content[..]
    } else {
        match opts.truncation {
            Truncation::Head => &content[..budget],
            Truncation::Tail => &content[content.len() - budget..],
        }
    };
    let mut ids = Vec::with_capacity(opts.max_len);
    ids.push(vocab.cls_id());
    ids.extend_from_slice(kept);
    ids.push(vocab.sep_id());
    let active = ids.len();
    ids.resize(opts.max_len, vocab.pad_id());
    let mut attention_mask = vec![1u8; active];
    attention_mask.resize(opts.max_len, 0);
    Ok(TokenSequence {
        ids,
        attention_mask,
        original_len: content.len(),
    })
}

/// Encodes `subject + " " + body`.
pub fn encode(subject: &str, body: &str, vocab: &Vocabulary, opts: EncodeOptions) -> Result<TokenSequence> {
    encode_text(&format!("{subject} {body}"), vocab, opts)
}

/// Maps ids back to token strings, skipping padding.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&id| id != vocab.pad_id())
        .filter_map(|&id| vocab.token(id).map(str::to_string))
        .collect()
}

/// Re-joins `##` continuations into words, dropping special tokens.
pub fn detokenize(tokens: &[String]) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for t in tokens {
        if [PAD, CLS, SEP].contains(&t.as_str()) {
            continue;
        }
        match t.strip_prefix(CONTINUATION) {
            Some(rest) if !words.is_empty() => words.last_mut().expect("non-empty").push_str(rest),
            _ => words.push(t.clone()),
        }
    }
    words
}
