use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CatBertModel;
use crate::scalar::Scalar;
use crate::tokenizer::Vocabulary;
use crate::train::{score_examples, Example};

/// Weights this close to zero are left out of the top lists.
const ZERO: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    pub samples: usize,
    pub seed: u64,
    /// Ridge penalty on the feature weights.
    pub ridge: f64,
    pub top_k: usize,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            ridge: 1.0,
            top_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub weights: BTreeMap<String, f64>,
    pub intercept: f64,
    /// Kernel-weighted coefficient of determination of the local fit.
    pub r2: f64,
    pub kernel_width: f64,
    pub top_positive: Vec<(String, f64)>,
    pub top_negative: Vec<(String, f64)>,
}

/// Fits a proximity-weighted ridge model over feature-presence samples.
///
/// `score` receives one presence vector per sample (true = feature kept)
/// and returns the model output for each. The first sample keeps every
/// feature; the rest keep each feature independently with probability ½.
pub fn lime_explain<F>(features: &[String], score: F, config: &LimeConfig) -> Result<Attribution>
where
    F: Fn(&[Vec<bool>]) -> Result<Vec<f64>>,
{
    if features.is_empty() {
        return Err(Error::Dataset("nothing to explain: content has no tokens".into()));
    }
    if config.samples < 50 {
        return Err(Error::Config(format!("at least 50 samples are needed, got {}", config.samples)));
    }
    let f = features.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = vec![vec![true; f]];
    for _ in 1..config.samples {
        samples.push((0..f).map(|_| rng.random::<bool>()).collect());
    }
    let y = score(&samples)?;
    if y.len() != samples.len() {
        return Err(Error::contract(format!("{} scores for {} samples", y.len(), samples.len())));
    }
    let width = 0.75 * (f as f64).sqrt();
    let kernel: Vec<f64> = samples
        .iter()
        .map(|z| {
            let d = z.iter().filter(|&&k| !k).count() as f64;
            (-(d * d) / (width * width)).exp()
        })
        .collect();

    let cols = f + 1;
    let mut xtwx = DMatrix::<f64>::zeros(cols, cols);
    let mut xtwy = DVector::<f64>::zeros(cols);
    let mut row = vec![0.0; cols];
    for ((z, &yi), &w) in samples.iter().zip(&y).zip(&kernel) {
        row[0] = 1.0;
        for (r, &k) in row[1..].iter_mut().zip(z) {
            *r = f64::from(u8::from(k));
        }
        for a in 0..cols {
            if row[a] == 0.0 {
                continue;
            }
            xtwy[a] += w * row[a] * yi;
            for b in 0..cols {
                xtwx[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for j in 1..cols {
        xtwx[(j, j)] += config.ridge;
    }
    let beta = xtwx
        .clone()
        .cholesky()
        .map(|c| c.solve(&xtwy))
        .or_else(|| xtwx.lu().solve(&xtwy))
        .ok_or_else(|| Error::NonFinite("explanation system is singular".into()))?;

    let wsum: f64 = kernel.iter().sum();
    let ymean = kernel.iter().zip(&y).map(|(w, v)| w * v).sum::<f64>() / wsum;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for ((z, &yi), &w) in samples.iter().zip(&y).zip(&kernel) {
        let pred = beta[0] + z.iter().enumerate().filter(|(_, &k)| k).map(|(j, _)| beta[j + 1]).sum::<f64>();
        ss_res += w * (yi - pred) * (yi - pred);
        ss_tot += w * (yi - ymean) * (yi - ymean);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res <= 1e-18 { 1.0 } else { 0.0 };

    let weights: BTreeMap<String, f64> = features.iter().enumerate().map(|(j, t)| (t.clone(), beta[j + 1])).collect();
    if weights.values().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("explanation weights".into()));
    }
    let mut ranked: Vec<(String, f64)> = weights.iter().map(|(k, &v)| (k.clone(), v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let top_positive = ranked.iter().filter(|(_, w)| *w > ZERO).take(config.top_k).cloned().collect();
    let top_negative = ranked.iter().rev().filter(|(_, w)| *w < -ZERO).take(config.top_k).cloned().collect();
    Ok(Attribution {
        weights,
        intercept: beta[0],
        r2,
        kernel_width: width,
        top_positive,
        top_negative,
    })
}

/// Explains one example of a CatBERT model. Features are the distinct
/// content tokens; masking a feature replaces all of its occurrences with
/// `[UNK]`.
pub fn explain_example<T: Scalar>(
    model: &CatBertModel<T>,
    vocab: &Vocabulary,
    example: &Example,
    config: &LimeConfig,
    batch_size: usize,
) -> Result<Attribution> {
    let range = example.sequence.content_range();
    let content = &example.sequence.ids[range.clone()];
    let mut distinct: Vec<usize> = content.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let features: Vec<String> = distinct
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("[UNK]").to_string())
        .collect();
    let unk = vocab.unk_id();
    lime_explain(
        &features,
        |samples| {
            let examples: Vec<Example> = samples
                .iter()
                .map(|keep| {
                    let mut e = example.clone();
                    for id in &mut e.sequence.ids[range.clone()] {
                        let f = distinct.binary_search(id).expect("content token is a feature");
                        if !keep[f] {
                            *id = unk;
                        }
                    }
                    e
                })
                .collect();
            score_examples(model, &examples, batch_size)
        },
        config,
    )
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}
