use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mail::Group;

/// FPR targets reported by default.
pub const DEFAULT_FPRS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Dataset(format!(
            "ROC metrics need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve from average ranks; tied scores count one
/// half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this are called positive.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold);
        }
        out
    }
}

/// One point per distinct score, from the empty selection at `+inf` down to
/// everything selected.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold,
        });
    }
    Ok(RocCurve { points })
}

/// TPR at the threshold whose FPR is the largest achievable value not
/// above each target.
pub fn tpr_at_fpr(scores: &[f64], labels: &[u8], targets: &[f64]) -> Result<Vec<f64>> {
    let curve = roc_curve(scores, labels)?;
    Ok(targets
        .iter()
        .map(|&t| {
            curve
                .points
                .iter()
                .filter(|p| p.fpr <= t)
                .map(|p| p.tpr)
                .fold(0.0, f64::max)
        })
        .collect())
}

/// The smallest threshold whose FPR does not exceed `target`.
pub fn threshold_at_fpr(scores: &[f64], labels: &[u8], target: f64) -> Result<f64> {
    let curve = roc_curve(scores, labels)?;
    Ok(curve
        .points
        .iter()
        .filter(|p| p.fpr <= target)
        .map(|p| p.threshold)
        .fold(f64::INFINITY, f64::min))
}

pub fn fpr_key(fpr: f64) -> String {
    format!("{fpr}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub positives: usize,
    pub negatives: usize,
}

pub fn metrics(scores: &[f64], labels: &[u8], fprs: &[f64]) -> Result<Metrics> {
    let (positives, negatives) = check(scores, labels)?;
    let tprs = tpr_at_fpr(scores, labels, fprs)?;
    Ok(Metrics {
        auc: roc_auc(scores, labels)?,
        tpr_at_fpr: fprs.iter().zip(tprs).map(|(&f, t)| (fpr_key(f), t)).collect(),
        positives,
        negatives,
    })
}

/// Scores with labels and optional group tags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub groups: Vec<Option<Group>>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, groups: Vec<Option<Group>>) -> Result<Self> {
        if scores.len() != labels.len() || (!groups.is_empty() && groups.len() != labels.len()) {
            return Err(Error::contract(format!(
                "score set of {} scores, {} labels, {} groups",
                scores.len(),
                labels.len(),
                groups.len()
            )));
        }
        Ok(Self { scores, labels, groups })
    }
}

/// Report name of a group tag; untagged and unrecognised tags share
/// `other`.
pub fn group_name(group: Option<&Group>) -> &'static str {
    match group {
        Some(Group::Bec) => "bec",
        Some(Group::English) => "english",
        Some(Group::NonEnglish) => "non_english",
        _ => "other",
    }
}

/// Per-group metrics where each group's positives are ranked against the
/// shared pool of all negatives. Groups without positives are omitted and
/// named in the returned warnings.
pub fn group_metrics(set: &ScoreSet, fprs: &[f64]) -> Result<(BTreeMap<String, Metrics>, Vec<String>)> {
    check(&set.scores, &set.labels)?;
    let mut names: Vec<&str> = (0..set.labels.len())
        .map(|i| group_name(set.groups.get(i).and_then(Option::as_ref)))
        .collect();
    if set.groups.is_empty() {
        names = vec!["other"; set.labels.len()];
    }
    let mut tags: Vec<&str> = names.clone();
    tags.sort();
    tags.dedup();
    let mut out = BTreeMap::new();
    let mut warnings = Vec::new();
    for tag in tags {
        let idx: Vec<usize> = (0..set.labels.len())
            .filter(|&i| set.labels[i] == 0 || names[i] == tag)
            .collect();
        if !idx.iter().any(|&i| set.labels[i] == 1) {
            let msg = format!("group {tag} has no positives; omitted");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let s: Vec<f64> = idx.iter().map(|&i| set.scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| set.labels[i]).collect();
        out.insert(tag.to_string(), metrics(&s, &l, fprs)?);
    }
    Ok((out, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

/// Mean and spread of each metric over several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auc: MeanStd,
    pub tpr_at_fpr: BTreeMap<String, MeanStd>,
}

pub fn aggregate(runs: &[Metrics]) -> Aggregate {
    let aucs: Vec<f64> = runs.iter().map(|r| r.auc).collect();
    let mut keys: Vec<&String> = runs.iter().flat_map(|r| r.tpr_at_fpr.keys()).collect();
    keys.sort();
    keys.dedup();
    Aggregate {
        auc: mean_std(&aucs),
        tpr_at_fpr: keys
            .into_iter()
            .map(|k| {
                let v: Vec<f64> = runs.iter().filter_map(|r| r.tpr_at_fpr.get(k).copied()).collect();
                (k.clone(), mean_std(&v))
            })
            .collect(),
    }
}

/// The metrics document written by evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub groups: BTreeMap<String, Metrics>,
    pub runs: Vec<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn build(set: &ScoreSet, fprs: &[f64]) -> Result<Self> {
        let overall = metrics(&set.scores, &set.labels, fprs)?;
        let (groups, warnings) = group_metrics(set, fprs)?;
        Ok(Self {
            auc: overall.auc,
            tpr_at_fpr: overall.tpr_at_fpr.clone(),
            groups,
            runs: vec![overall],
            aggregate: None,
            warnings,
        })
    }
}
