use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mail::EmailRecord;

/// Fractions of the time-ordered records assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let spec = Self {
            train,
            validation,
            test,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `0.7,0.15,0.15`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("fractions {s:?}: {e}")))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::Config(format!("expected three fractions, got {s:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split fractions {f:?} must lie in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<EmailRecord>,
    pub validation: Vec<EmailRecord>,
    pub test: Vec<EmailRecord>,
}

/// Orders records by first-seen time (missing last, ties in input order)
/// and cuts them into consecutive train, validation and test ranges.
/// Train and validation sizes are floored; the remainder goes to test.
pub fn split_by_time(records: &[EmailRecord], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut sorted: Vec<&EmailRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.first_seen.is_none(), r.first_seen));
    let n = sorted.len() as f64;
    let n_train = (spec.train * n + 1e-9).floor() as usize;
    let n_val = ((spec.validation * n + 1e-9).floor() as usize).min(sorted.len() - n_train);
    let owned = |rs: &[&EmailRecord]| rs.iter().map(|&r| r.clone()).collect();
    Ok(Splits {
        train: owned(&sorted[..n_train]),
        validation: owned(&sorted[n_train..n_train + n_val]),
        test: owned(&sorted[n_train + n_val..]),
    })
}
