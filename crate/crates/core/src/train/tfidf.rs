//! TF-IDF features over word uni/bi-grams with a logistic regression head.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{sigmoid_scalar, PROB_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrConfig {
    pub min_n: usize,
    pub max_n: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weights, not the bias.
    pub l2: f64,
    /// Rescale weights so both classes carry equal total weight.
    pub class_balance: bool,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            min_n: 1,
            max_n: 2,
            iterations: 500,
            learning_rate: 2.0,
            l2: 1e-4,
            class_balance: true,
        }
    }
}

/// Lower-cased alphanumeric runs.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngrams(text: &str, min_n: usize, max_n: usize) -> Vec<String> {
    let w = words(text);
    let mut out = Vec::new();
    for n in min_n.max(1)..=max_n {
        out.extend(w.windows(n).map(|g| g.join(" ")));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfLr {
    pub config: LrConfig,
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

type Sparse = Vec<(usize, f64)>;

impl TfidfLr {
    /// Fits the vectorizer and the classifier by full-batch gradient
    /// descent on weighted binary cross-entropy.
    pub fn fit(texts: &[String], labels: &[u8], weights: &[f32], config: LrConfig) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Dataset("cannot fit on an empty dataset".into()));
        }
        if labels.len() != texts.len() || weights.len() != texts.len() {
            return Err(Error::contract(format!(
                "{} texts, {} labels, {} weights",
                texts.len(),
                labels.len(),
                weights.len()
            )));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let grams: Vec<Vec<String>> = texts.iter().map(|t| ngrams(t, config.min_n, config.max_n)).collect();
        for g in &grams {
            let mut seen: Vec<&String> = g.iter().collect();
            seen.sort();
            seen.dedup();
            for s in seen {
                *df.entry(s.clone()).or_default() += 1;
            }
        }
        let n = texts.len() as f64;
        let vocabulary: BTreeMap<String, usize> = df.keys().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        let idf: Vec<f64> = df.values().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        let mut model = Self {
            config,
            vocabulary,
            idf,
            weights: Vec::new(),
            bias: 0.0,
        };
        model.weights = vec![0.0; model.idf.len()];
        let x: Vec<Sparse> = grams.iter().map(|g| model.vectorize_grams(g)).collect();

        let mut w: Vec<f64> = weights.iter().map(|&v| f64::from(v)).collect();
        if config.class_balance {
            let pos: f64 = w.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(v, _)| v).sum();
            let neg: f64 = w.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(v, _)| v).sum();
            if pos > 0.0 && neg > 0.0 {
                let total = pos + neg;
                for (v, &l) in w.iter_mut().zip(labels) {
                    *v *= total / (2.0 * if l == 1 { pos } else { neg });
                }
            }
        }
        let wsum: f64 = w.iter().sum();
        let mut grad = vec![0.0; model.weights.len()];
        for _ in 0..config.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for ((row, &y), &wi) in x.iter().zip(labels).zip(&w) {
                let p = model.prob_sparse(row);
                let r = wi * (p - f64::from(y)) / wsum;
                grad_b += r;
                for &(j, v) in row {
                    grad[j] += r * v;
                }
            }
            for (wj, gj) in model.weights.iter_mut().zip(&grad) {
                *wj -= config.learning_rate * (gj + config.l2 * *wj);
            }
            model.bias -= config.learning_rate * grad_b;
        }
        Ok(model)
    }

    fn vectorize_grams(&self, grams: &[String]) -> Sparse {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for g in grams {
            if let Some(&j) = self.vocabulary.get(g) {
                *counts.entry(j).or_default() += 1.0;
            }
        }
        let mut row: Sparse = counts.into_iter().map(|(j, c)| (j, c * self.idf[j])).collect();
        let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|(_, v)| *v /= norm);
        }
        row
    }

    /// L2-normalized TF-IDF row; unseen n-grams are dropped.
    pub fn vectorize(&self, text: &str) -> Vec<(usize, f64)> {
        self.vectorize_grams(&ngrams(text, self.config.min_n, self.config.max_n))
    }

    fn prob_sparse(&self, row: &Sparse) -> f64 {
        let z = self.bias + row.iter().map(|&(j, v)| self.weights[j] * v).sum::<f64>();
        sigmoid_scalar(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    pub fn predict(&self, text: &str) -> f64 {
        self.prob_sparse(&self.vectorize(text))
    }

    pub fn weight_of(&self, gram: &str) -> Option<f64> {
        self.vocabulary.get(gram).map(|&j| self.weights[j])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
