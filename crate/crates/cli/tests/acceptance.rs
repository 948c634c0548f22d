//! Acceptance criteria, one pass/fail line each.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use catbert_core::eval::{
    accuracy_under_attack, explain_example, lime_explain, roc_auc, spearman, time_inference, tpr_at_fpr, AttackKind,
    AttackSpec, CatBertScorer, LimeConfig, TimingConfig, DEFAULT_FPRS,
};
use catbert_core::mail::build_content;
use catbert_core::model::{
    count_params, parse_plan, surgery_from_donor, Architecture, ModelConfig, ModelInput, PARTIAL_FINETUNE,
};
use catbert_core::synthetic::{generate, SyntheticConfig, SyntheticCorpus};
use catbert_core::tensor::{grad_check, grad_check_against, LossFn, ParamStore, Tape, Var};
use catbert_core::tokenizer::{wordpiece, EncodeOptions};
use catbert_core::train::{
    prepare_examples, split_by_time, train, LrConfig, PrepareOptions, SplitSpec, Splits, TfidfLr, TrainConfig,
};
use catbert_core::{Model, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- shared

fn prepare() -> PrepareOptions {
    PrepareOptions {
        encode: EncodeOptions {
            max_len: 32,
            ..EncodeOptions::default()
        },
        ..PrepareOptions::default()
    }
}

struct Trained {
    model: Model,
    corpus: SyntheticCorpus,
    splits: Splits,
    val_auc: f64,
}

fn train_synthetic(seed: u64, context_dependent: bool, zero_context: bool) -> Trained {
    let corpus = generate(&SyntheticConfig {
        seed,
        context_dependent,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let splits = split_by_time(&corpus.records, &SplitSpec::default()).unwrap();
    let opts = PrepareOptions {
        zero_context,
        ..prepare()
    };
    let train_set = prepare_examples(&splits.train, &corpus.vocabulary, &opts).unwrap();
    let val_set = prepare_examples(&splits.validation, &corpus.vocabulary, &opts).unwrap();
    let mut model = Model::init_random(&ModelConfig::tiny(corpus.vocabulary.len()), seed).unwrap();
    let config = TrainConfig {
        epochs: 5,
        batch_size: 32,
        balanced: true,
        learning_rate: 3e-3,
        seed,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &train_set, &val_set, &config, None).unwrap();
    Trained {
        model,
        corpus,
        splits,
        val_auc: history.best_val_auc.unwrap(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ------------------------------------------------------------ criteria

fn parameter_accounting() -> Outcome {
    let catbert = count_params(&ModelConfig::catbert());
    let distil = count_params(&ModelConfig::distilbert());
    let whole = |n: usize| n / 1_000_000;
    let tenths = |n: usize| (n as f64 / 1e5).round() / 10.0;
    let table = [
        (whole(catbert.embedding), 92),
        (whole(catbert.non_embedding), 25),
        (whole(catbert.total), 117),
        (whole(distil.embedding), 92),
        (whole(distil.non_embedding), 43),
        (whole(distil.total), 135),
    ];
    let pass = table.iter().all(|(a, b)| a == b)
        && tenths(catbert.embedding) == 92.2
        && tenths(catbert.non_embedding) == 25.4
        && tenths(catbert.total) == 117.6;
    outcome(
        pass,
        format!(
            "CatBERT {} / {} / {}, DistilBERT {} / {} / {} (embedding / non-embedding / total)",
            catbert.embedding, catbert.non_embedding, catbert.total, distil.embedding, distil.non_embedding, distil.total
        ),
    )
}

fn speedup() -> Outcome {
    let timing = TimingConfig {
        batch_sizes: vec![1],
        seq_len: 128,
        repetitions: 10,
        warmup: 3,
        seed: 0,
    };
    let time = |config: ModelConfig| {
        let model = Model::init_random(&config, 0).unwrap();
        time_inference(&model, &timing).unwrap().entries[0].p50_ms
    };
    let vocab_size = 30_522;
    let catbert = time(ModelConfig {
        vocab_size,
        ..ModelConfig::catbert()
    });
    let distil = time(ModelConfig {
        vocab_size,
        ..ModelConfig::distilbert()
    });
    let ratio = distil / catbert;
    outcome(
        ratio >= 1.3,
        format!("6T {distil:.1} ms vs 3T+3A {catbert:.1} ms per inference, {ratio:.2}x (need >= 1.3x)"),
    )
}

struct ModelLoss {
    arch: Architecture,
    input: ModelInput,
    labels: Vec<f64>,
    weights: Vec<f64>,
}

impl LossFn for ModelLoss {
    fn loss<'a, T: Scalar>(&self, tape: &mut Tape<'a, T>, params: &'a ParamStore<T>) -> catbert_core::Result<Var> {
        let out = self.arch.forward(tape, params, &self.input)?;
        let y: Vec<T> = self.labels.iter().map(|&v| T::lit(v)).collect();
        let w: Vec<T> = self.weights.iter().map(|&v| T::lit(v)).collect();
        tape.bce(out.probs, &y, &w)
    }
}

fn gradient_fidelity() -> Outcome {
    let config = ModelConfig {
        hidden: 8,
        ffn: 16,
        heads: 2,
        max_positions: 16,
        plan: parse_plan("T,A").unwrap(),
        init_std: 0.5,
        ..ModelConfig::tiny(100)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (batch, seq) = (2, 6);
    let ids = (0..batch * seq).map(|_| rng.random_range(0..100)).collect();
    let mask = vec![true, true, true, true, true, false, true, true, true, true, true, true];
    let context = (0..batch * 4).map(|_| rng.random_range(0.0..1.0)).collect();
    let loss = ModelLoss {
        arch: Architecture::new(config.clone()).unwrap(),
        input: ModelInput::new(ids, mask, batch, seq, context).unwrap(),
        labels: vec![1.0, 0.0],
        weights: vec![1.0, 2.0],
    };
    let m64 = catbert_core::Model64::init_random(&config, 3).unwrap();
    let m32 = m64.cast::<f32>();
    let r32 = grad_check_against::<f32, f64, _>(&loss, m32.params(), 1e-4).unwrap();
    let r64 = grad_check(&loss, m64.params(), 1e-6).unwrap();
    outcome(
        r32.max_relative_error < 1e-2 && r64.max_relative_error < 1e-4,
        format!(
            "{} coordinates, max relative error f32 {:.2e} (< 1e-2), f64 {:.2e} (< 1e-4), worst f64 at {:?}",
            r64.coordinates, r32.max_relative_error, r64.max_relative_error, r64.worst
        ),
    )
}

fn end_to_end(content: &[Trained]) -> Outcome {
    let aucs: Vec<f64> = content.iter().map(|t| t.val_auc).collect();
    let mut aware = Vec::new();
    let mut zeroed = Vec::new();
    for seed in SEEDS {
        aware.push(train_synthetic(seed, true, false).val_auc);
        zeroed.push(train_synthetic(seed, true, true).val_auc);
    }
    let gap = mean(&aware) - mean(&zeroed);
    outcome(
        mean(&aucs) >= 0.95 && gap >= 0.05,
        format!(
            "planted-token val AUC mean {:.4} (>= 0.95); context variant {:.4} vs zeroed {:.4}, gap {gap:.4} (>= 0.05)",
            mean(&aucs),
            mean(&aware),
            mean(&zeroed)
        ),
    )
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                total += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    total / pairs
}

fn sweep_tpr(scores: &[f64], labels: &[u8], target: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    thresholds
        .iter()
        .filter_map(|&t| {
            let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
            let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 0).count() as f64;
            (fp / neg <= target).then_some(tp / pos)
        })
        .fold(0.0, f64::max)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let targets: Vec<f64> = DEFAULT_FPRS.iter().copied().chain([0.0, 0.05, 0.3, 1.0]).collect();
    let mut worst_auc: f64 = 0.0;
    let mut tpr_mismatches = 0;
    for set in 0..100 {
        let n = rng.random_range(2..200);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let coarse = set % 2 == 0;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s = rng.random_range(0.0..1.0) + 0.3 * f64::from(l);
                if coarse {
                    (s * 10.0).round() / 10.0
                } else {
                    s
                }
            })
            .collect();
        worst_auc = worst_auc.max((roc_auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs());
        let got = tpr_at_fpr(&scores, &labels, &targets).unwrap();
        for (g, &t) in got.iter().zip(&targets) {
            if *g != sweep_tpr(&scores, &labels, t) {
                tpr_mismatches += 1;
            }
        }
    }
    outcome(
        worst_auc < 1e-12 && tpr_mismatches == 0,
        format!("100 score sets: max AUC deviation {worst_auc:.1e} (< 1e-12), {tpr_mismatches} TPR@FPR mismatches"),
    )
}

fn surgery_correctness() -> Outcome {
    let donor_config = ModelConfig {
        plan: parse_plan("T,T,T,T,T,T").unwrap(),
        ..ModelConfig::tiny(50)
    };
    let donor = Model::init_random(&donor_config, 21).unwrap();
    let keep = [0, 2, 4];
    let with_adapters = ModelConfig {
        plan: parse_plan("T,A,T,A,T,A").unwrap(),
        zero_adapter_output: true,
        ..donor_config.clone()
    };
    let blocks_only = ModelConfig {
        plan: parse_plan("T,T,T").unwrap(),
        ..donor_config.clone()
    };
    let a = surgery_from_donor(&donor, &with_adapters, &keep, 5).unwrap();
    let mut b = surgery_from_donor(&donor, &blocks_only, &keep, 5).unwrap();

    let mut copied = 0;
    let mut mismatched = Vec::new();
    for p in a.params().iter() {
        let source = if p.name.starts_with("embeddings.") {
            Some(p.name.clone())
        } else if let Some(rest) = p.name.strip_prefix("transformer.") {
            let (j, tail) = rest.split_once('.').unwrap();
            Some(format!("transformer.{}.{tail}", keep[j.parse::<usize>().unwrap()]))
        } else {
            None
        };
        if let Some(source) = source {
            copied += 1;
            let d = donor.param(&source).unwrap();
            if d.data().iter().map(|x| x.to_bits()).ne(p.value.data().iter().map(|x| x.to_bits())) {
                mismatched.push(p.name.clone());
            }
        }
    }
    for p in a.params().iter().filter(|p| p.name.starts_with("classifier.")) {
        b.params_mut().by_name_mut(&p.name).unwrap().value = p.value.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (batch, seq) = (rng.random_range(1..4), rng.random_range(2..20));
        let ids = (0..batch * seq).map(|_| rng.random_range(0..50)).collect();
        let context = (0..batch * 4).map(|_| rng.random_range(0.0..2.0)).collect();
        let input = ModelInput::new(ids, vec![true; batch * seq], batch, seq, context).unwrap();
        let pa = a.predict(&input).unwrap();
        let pb = b.predict(&input).unwrap();
        worst = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    outcome(
        mismatched.is_empty() && copied > 0 && worst < 1e-6,
        format!(
            "{copied} copied tensors, {} not bit-equal; max output difference {worst:.1e} (< 1e-6) on 10 inputs",
            mismatched.len()
        ),
    )
}

fn freeze_contract() -> Outcome {
    let corpus = generate(&SyntheticConfig {
        records: 400,
        malicious_fraction: 0.25,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let splits = split_by_time(&corpus.records, &SplitSpec::default()).unwrap();
    let train_set = prepare_examples(&splits.train, &corpus.vocabulary, &prepare()).unwrap();
    let val_set = prepare_examples(&splits.validation, &corpus.vocabulary, &prepare()).unwrap();
    let config = ModelConfig {
        plan: parse_plan("T,A,T,A,T,A").unwrap(),
        ..ModelConfig::tiny(corpus.vocabulary.len())
    };
    let mut model = Model::init_random(&config, 4).unwrap();
    let before = model.clone();
    let history = train(
        &mut model,
        &train_set,
        &val_set,
        &TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 3e-3,
            freeze: Some(PARTIAL_FINETUNE.into()),
            ..TrainConfig::default()
        },
        None,
    )
    .unwrap();
    let bits = |m: &Model, name: &str| m.param(name).unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let changed_frozen = history.frozen.iter().filter(|n| bits(&model, n) != bits(&before, n)).count();
    let trainable_changed = model
        .params()
        .iter()
        .filter(|p| !history.frozen.contains(&p.name))
        .filter(|p| bits(&model, &p.name) != bits(&before, &p.name))
        .count();
    outcome(
        !history.frozen.is_empty() && changed_frozen == 0 && trainable_changed > 0,
        format!(
            "{} frozen tensors, {changed_frozen} changed after 3 epochs; {trainable_changed} trainable tensors moved",
            history.frozen.len()
        ),
    )
}

fn robustness(content: &[Trained]) -> Outcome {
    let mut drops = [[0.0; 2]; 2];
    for t in content {
        let texts: Vec<String> = t.splits.train.iter().map(build_content).collect();
        let labels: Vec<u8> = t.splits.train.iter().map(|r| r.label).collect();
        let weights = vec![1.0; labels.len()];
        let lr = TfidfLr::fit(&texts, &labels, &weights, LrConfig::default()).unwrap();
        let scorer = CatBertScorer {
            model: &t.model,
            vocab: &t.corpus.vocabulary,
            options: prepare(),
            batch_size: 64,
        };
        for (k, kind) in [AttackKind::Synonym, AttackKind::Typo].into_iter().enumerate() {
            let spec = AttackSpec {
                kind,
                rate: 0.5,
                seed: t.model.config().seed,
                synonyms: t.corpus.synonyms.clone(),
                ..AttackSpec::default()
            };
            drops[k][0] += accuracy_under_attack(&scorer, &t.splits.test, &spec, 0.5).unwrap().delta;
            drops[k][1] += accuracy_under_attack(&lr, &t.splits.test, &spec, 0.5).unwrap().delta;
        }
    }
    let n = content.len() as f64;
    let [[syn_cat, syn_lr], [typo_cat, typo_lr]] = drops.map(|d| d.map(|v| v / n));
    outcome(
        syn_cat < syn_lr && typo_cat < typo_lr,
        format!(
            "mean accuracy drop, CatBERT vs TF-IDF LR: synonym {syn_cat:.3} vs {syn_lr:.3}, typo {typo_cat:.3} vs {typo_lr:.3}"
        ),
    )
}

fn explainer(content: &[Trained]) -> Outcome {
    let mut hits = 0;
    let mut tops = Vec::new();
    for t in content {
        let pieces: BTreeSet<String> = t
            .corpus
            .planted
            .iter()
            .flat_map(|w| wordpiece(w, &t.corpus.vocabulary))
            .collect();
        let test = prepare_examples(&t.splits.test, &t.corpus.vocabulary, &prepare()).unwrap();
        let example = test.iter().find(|e| e.label == 1).unwrap();
        let lime = LimeConfig {
            seed: t.model.config().seed,
            ..LimeConfig::default()
        };
        let a = explain_example(&t.model, &t.corpus.vocabulary, example, &lime, 64).unwrap();
        let top: Vec<String> = a.top_positive.iter().take(3).map(|(k, _)| k.clone()).collect();
        hits += usize::from(top.iter().any(|k| pieces.contains(k)));
        tops.push(top.join(" "));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 1.0;
    for o in 0..20 {
        let f = rng.random_range(5..15);
        let features: Vec<String> = (0..f).map(|j| format!("f{j:02}")).collect();
        let w: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-0.5..0.5);
        let a = lime_explain(
            &features,
            |samples| {
                Ok(samples
                    .iter()
                    .map(|z| b + z.iter().zip(&w).filter(|(k, _)| **k).map(|(_, wj)| wj).sum::<f64>())
                    .collect())
            },
            &LimeConfig {
                seed: o,
                ..LimeConfig::default()
            },
        )
        .unwrap();
        let recovered: Vec<f64> = features.iter().map(|k| a.weights[k]).collect();
        worst = worst.min(spearman(&recovered, &w));
    }
    outcome(
        hits >= 4 && worst >= 0.9,
        format!("planted piece in top-3 for {hits}/5 seeds ({}); min Spearman over 20 linear oracles {worst:.3}", tops.join(" | ")),
    )
}

fn catbert(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_catbert"))
        .current_dir(dir)
        .env("CATBERT_LOG", "warn")
        .args(args)
        .status()
        .unwrap();
    assert!(status.success(), "catbert {args:?} failed");
}

/// Every file under `dir`, with run manifests stripped of their duration.
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = fs::read(&path).unwrap();
            let name = path.strip_prefix(dir).unwrap().display().to_string();
            if name.ends_with("run.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("duration_ms");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.push((name, bytes));
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let pipeline = |dir: &Path| {
        catbert(dir, &["synth", "--out", "syn", "--records", "600", "--seed", "3"]);
        catbert(dir, &["split", "--in", "syn/data.jsonl", "--out", "split"]);
        catbert(dir, &[
            "train", "--data", "split/train.jsonl", "--validation", "split/validation.jsonl", "--vocab",
            "syn/vocab.txt", "--out", "ckpt", "--epochs", "2", "--batch-size", "16", "--lr", "3e-3", "--max-len",
            "32", "--seed", "3",
        ]);
        catbert(dir, &["eval", "--model", "ckpt", "--data", "split/test.jsonl", "--out", "metrics.json", "--roc", "roc.csv"]);
        for kind in ["synonym", "typo", "homoglyph"] {
            let out = format!("attack-{kind}.json");
            let samples = format!("attack-{kind}.jsonl");
            catbert(dir, &[
                "attack", "--model", "ckpt", "--data", "split/test.jsonl", "--kind", kind, "--synonyms",
                "syn/synonyms.json", "--seed", "3", "--out", &out, "--samples-out", &samples,
            ]);
        }
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let differing: Vec<&String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| &x.0)
        .collect();
    outcome(
        fa.len() == fb.len() && differing.is_empty(),
        format!("{} artifacts from synth/split/train/eval/attack, {} differ {differing:?}", fa.len(), differing.len()),
    )
}

// ------------------------------------------------------------- harness

fn check(n: usize, name: &str, budget: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = run();
    let elapsed = start.elapsed();
    let pass = o.pass && elapsed < budget;
    println!(
        "criterion {n:>2} [{}] {name}: {} ({:.1} s, budget {} s)",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut results = Vec::new();
    results.push(check(1, "parameter accounting", secs(1), parameter_accounting));
    results.push(check(2, "speedup direction", secs(300), speedup));
    results.push(check(3, "gradient fidelity", secs(120), gradient_fidelity));

    let start = Instant::now();
    let content: Vec<Trained> = SEEDS.iter().map(|&s| train_synthetic(s, false, false)).collect();
    let shared = start.elapsed();
    results.push(check(4, "end-to-end learning", secs(600) - shared, || end_to_end(&content)));
    results.push(check(5, "metric oracles", secs(60), metric_oracles));
    results.push(check(6, "surgery correctness", secs(60), surgery_correctness));
    results.push(check(7, "freeze contract", secs(300), freeze_contract));
    results.push(check(8, "robustness direction", secs(900) - shared, || robustness(&content)));
    results.push(check(9, "explainer sanity", secs(300) - shared, || explainer(&content)));
    results.push(check(10, "determinism", secs(600), determinism));

    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
