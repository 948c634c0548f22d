use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Evaluation slice a message belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Bec,
    English,
    NonEnglish,
    Other(String),
}

impl Group {
    pub fn as_str(&self) -> &str {
        match self {
            Group::Bec => "bec",
            Group::English => "english",
            Group::NonEnglish => "non_english",
            Group::Other(s) => s,
        }
    }

    pub fn parse(s: &str) -> Self {
        match s {
            "bec" => Group::Bec,
            "english" => Group::English,
            "non_english" => Group::NonEnglish,
            other => Group::Other(other.to_string()),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Group {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Group {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d).map(|s| Group::parse(&s))
    }
}

/// One message as it appears in a JSON Lines dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmailRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_html: Option<String>,
    #[serde(rename = "from", default)]
    pub from_addr: String,
    #[serde(rename = "to", default)]
    pub to_addrs: Vec<String>,
    #[serde(rename = "cc", default)]
    pub cc_addrs: Vec<String>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Group>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_seen: Option<DateTime<Utc>>,
}

impl EmailRecord {
    pub fn is_malicious(&self) -> bool {
        self.label == 1
    }

    pub fn weight(&self) -> f32 {
        self.weight.unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Dataset(format!("label must be 0 or 1, got {}", self.label)));
        }
        if let Some(w) = self.weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Dataset(format!("weight must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Records in file order plus every rejected line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<EmailRecord>,
    pub errors: Vec<LineError>,
}

/// Parses JSON Lines. Blank lines are skipped; unknown fields ignored.
/// In strict mode the first bad line is returned as an error.
pub fn parse_dataset<R: BufRead>(reader: R, strict: bool) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<EmailRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => ds.records.push(r),
            Err(message) => {
                let err = LineError { line: i + 1, message };
                if strict {
                    return Err(Error::Dataset(err.to_string()));
                }
                ds.errors.push(err);
            }
        }
    }
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>, strict: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file), strict)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[EmailRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}
