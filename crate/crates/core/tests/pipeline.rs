use std::path::Path;

use catbert_core::eval::{attack, roc_auc, AttackKind, AttackSpec};
use catbert_core::mail::build_content;
use catbert_core::model::ModelConfig;
use catbert_core::synthetic::{generate, SyntheticConfig};
use catbert_core::tokenizer::EncodeOptions;
use catbert_core::train::{
    prepare_examples, split_by_time, train, LrConfig, PrepareOptions, SplitSpec, TfidfLr, TrainConfig,
};
use catbert_core::Model;
use serde::{Deserialize, Serialize};

fn options() -> PrepareOptions {
    PrepareOptions {
        encode: EncodeOptions {
            max_len: 32,
            ..EncodeOptions::default()
        },
        ..PrepareOptions::default()
    }
}

#[test]
fn tiny_model_learns_the_planted_token() {
    let corpus = generate(&SyntheticConfig::default()).unwrap();
    let splits = split_by_time(&corpus.records, &SplitSpec::default()).unwrap();
    let train_set = prepare_examples(&splits.train, &corpus.vocabulary, &options()).unwrap();
    let val_set = prepare_examples(&splits.validation, &corpus.vocabulary, &options()).unwrap();
    let mut model = Model::init_random(&ModelConfig::tiny(corpus.vocabulary.len()), 0).unwrap();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 32,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let h = train(&mut model, &train_set, &val_set, &config, None).unwrap();
    let losses: Vec<f64> = h.epochs.iter().map(|e| e.mean_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(h.best_val_auc.unwrap() >= 0.95, "{h:?}");
}

#[test]
fn tfidf_baseline_finds_the_planted_unigram() {
    let corpus = generate(&SyntheticConfig {
        seed: 5,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let splits = split_by_time(&corpus.records, &SplitSpec::default()).unwrap();
    let texts: Vec<String> = splits.train.iter().map(build_content).collect();
    let labels: Vec<u8> = splits.train.iter().map(|r| r.label).collect();
    let lr = TfidfLr::fit(&texts, &labels, &vec![1.0; labels.len()], LrConfig::default()).unwrap();
    let scores: Vec<f64> = splits.test.iter().map(|r| lr.predict(&build_content(r))).collect();
    let test_labels: Vec<u8> = splits.test.iter().map(|r| r.label).collect();
    assert!(roc_auc(&scores, &test_labels).unwrap() >= 0.9);
    let planted = lr.weight_of("wiretransfer").unwrap();
    assert!(planted > 0.0 && planted > lr.weight_of("meeting").unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lr.json");
    lr.save(&path).unwrap();
    assert_eq!(TfidfLr::load(&path).unwrap(), lr);
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TypoCase {
    text: String,
    seed: u64,
    rate: f64,
    attacked: String,
}

const TYPO_INPUTS: [&str; 4] = [
    "Please send the wiretransfer today.",
    "Your account has been suspended, verify your password now!",
    "Quarterly report attached; see slides 3-5.",
    "URGENT: update payroll details before Friday",
];

/// Typo edits are a fixed choice of swap, drop and double; this file pins
/// their exact output. Regenerate with `UPDATE_GOLDEN=1`.
#[test]
fn typo_attack_matches_golden_file() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/typo.json");
    let cases: Vec<TypoCase> = TYPO_INPUTS
        .iter()
        .flat_map(|text| {
            [(0u64, 0.5), (1, 0.5), (2, 1.0)].map(|(seed, rate)| {
                let spec = AttackSpec {
                    kind: AttackKind::Typo,
                    rate,
                    seed,
                    ..AttackSpec::default()
                };
                TypoCase {
                    text: text.to_string(),
                    seed,
                    rate,
                    attacked: attack(text, &spec),
                }
            })
        })
        .collect();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&cases).unwrap() + "\n").unwrap();
    }
    let golden: Vec<TypoCase> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(cases, golden);
}
