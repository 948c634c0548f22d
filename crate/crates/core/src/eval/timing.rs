use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_params, format_plan, CatBertModel, ModelInput, ParamReport};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    pub batch_sizes: Vec<usize>,
    pub seq_len: usize,
    pub repetitions: usize,
    /// Untimed runs before measuring; at least 3.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1],
            seq_len: 128,
            repetitions: 10,
            warmup: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub batch_size: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub plan: String,
    pub seq_len: usize,
    pub params: ParamReport,
    pub entries: Vec<TimingEntry>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Wall-clock latency of full-length forward passes on random ids.
pub fn time_inference<T: Scalar>(model: &CatBertModel<T>, config: &TimingConfig) -> Result<TimingReport> {
    if config.warmup < 3 || config.repetitions == 0 {
        return Err(Error::Config(format!(
            "timing needs at least 3 warm-up runs and 1 repetition, got {} and {}",
            config.warmup, config.repetitions
        )));
    }
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::new();
    for &batch in &config.batch_sizes {
        let n = batch * config.seq_len;
        let ids = (0..n).map(|_| rng.random_range(0..c.vocab_size)).collect();
        let context = (0..batch * c.context_dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let input = ModelInput::new(ids, vec![true; n], batch, config.seq_len, context)?;
        for _ in 0..config.warmup {
            model.predict(&input)?;
        }
        let mut samples = Vec::with_capacity(config.repetitions);
        for _ in 0..config.repetitions {
            let start = Instant::now();
            std::hint::black_box(model.predict(&input)?);
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        entries.push(TimingEntry {
            batch_size: batch,
            mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
            p50_ms: percentile(&sorted, 0.5),
            p95_ms: percentile(&sorted, 0.95),
            samples_ms: samples,
        });
    }
    Ok(TimingReport {
        plan: format_plan(&c.plan),
        seq_len: config.seq_len,
        params: count_params(c),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&v, 0.5), 5.0);
        assert_eq!(percentile(&v, 0.95), 10.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }

    #[test]
    fn warmup_minimum() {
        let m = CatBertModel::<f32>::init_random(&crate::model::ModelConfig::tiny(10), 0).unwrap();
        let cfg = TimingConfig {
            warmup: 2,
            ..Default::default()
        };
        assert!(time_inference(&m, &cfg).is_err());
    }
}
