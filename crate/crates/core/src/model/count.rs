use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// Closed-form parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub embedding: usize,
    pub per_transformer: usize,
    pub per_adapter: usize,
    pub classifier: usize,
    pub transformers: usize,
    pub adapters: usize,
    pub non_embedding: usize,
    pub total: usize,
}

pub fn count_params(config: &ModelConfig) -> ParamReport {
    let (v, d, f, p) = (config.vocab_size, config.hidden, config.ffn, config.max_positions);
    let dh = config.classifier_dim();
    let embedding = v * d + p * d + 2 * d;
    let per_transformer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
    let per_adapter = 2 * (d * d + d);
    let classifier = (d + config.context_dim) * dh + dh + dh + 1;
    let transformers = config.transformers();
    let adapters = config.adapters();
    let non_embedding = transformers * per_transformer + adapters * per_adapter + classifier;
    ParamReport {
        embedding,
        per_transformer,
        per_adapter,
        classifier,
        transformers,
        adapters,
        non_embedding,
        total: embedding + non_embedding,
    }
}

fn millions(n: usize) -> String {
    format!("{:.1}", n as f64 / 1e6)
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{:>14}{:>8}", "part", "parameters", "M")?;
        let rows = [
            ("embedding".to_string(), self.embedding),
            (format!("transformer x{}", self.transformers), self.transformers * self.per_transformer),
            (format!("adapter x{}", self.adapters), self.adapters * self.per_adapter),
            ("classifier".to_string(), self.classifier),
            ("non-embedding".to_string(), self.non_embedding),
            ("total".to_string(), self.total),
        ];
        for (name, n) in rows {
            writeln!(f, "{name:<24}{n:>14}{:>8}", millions(n))?;
        }
        Ok(())
    }
}
