use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use catbert_core::eval::{
    accuracy_under_attack, aggregate, attack_records, default_homoglyphs, explain_example, threshold_at_fpr,
    time_inference, roc_curve, AttackKind, AttackSpec, LimeConfig, MetricsReport, ScoreSet, TimingConfig,
};
use catbert_core::mail::{build_content, extract_context, load_dataset, write_dataset, EmailRecord};
use catbert_core::model::{
    count_params, load_checkpoint, parse_plan, save_checkpoint, surgery_from_donor, BlockKind, ModelConfig,
};
use catbert_core::synthetic::{generate, SyntheticConfig};
use catbert_core::tokenizer::{EncodeOptions, Vocabulary};
use catbert_core::train::{
    prepare_example, prepare_examples, split_by_time, train, LrConfig, PrepareOptions, SplitSpec, TfidfLr,
    TrainConfig,
};
use catbert_core::{Model, Scalar};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::detector::{Detector, Pipeline, LR_FILE, VOCAB_FILE};
use crate::manifest::RunRecorder;
use crate::{AttackArgs, Cli, Command, EncodeArgs, ModelSource, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let seed = cli.global.seed;
    let manifest = cli.global.manifest.as_deref();
    match cli.command {
        Command::Ingest { input, out, strict } => ingest(&input, &out, strict, seed, manifest),
        Command::Split { input, out, fractions } => split(&input, &out, &fractions, seed, manifest),
        Command::Train(args) => train_cmd(&args, seed, manifest),
        Command::Surgery {
            donor,
            keep,
            plan,
            zero_adapters,
            out,
        } => surgery(&donor, &keep, plan.as_deref(), zero_adapters, &out, seed, manifest),
        Command::Params { model, json, out } => params(&model, json, out.as_deref(), seed, manifest),
        Command::Eval {
            models,
            data,
            vocab,
            fprs,
            out,
            roc,
            batch_size,
        } => eval(&models, &data, vocab.as_deref(), &fprs, &out, roc.as_deref(), batch_size, seed, manifest),
        Command::Predict {
            model,
            input,
            vocab,
            out,
            batch_size,
        } => predict(&model, &input, vocab.as_deref(), out.as_deref(), batch_size, seed, manifest),
        Command::Attack(args) => attack_cmd(&args, seed, manifest),
        Command::Explain {
            model,
            data,
            record_id,
            vocab,
            samples,
            top_k,
            out,
            batch_size,
        } => {
            let lime = LimeConfig {
                samples,
                seed,
                top_k,
                ..LimeConfig::default()
            };
            explain(&model, &data, &record_id, vocab.as_deref(), &lime, &out, batch_size, manifest)
        }
        Command::Bench {
            source,
            model,
            seq_len,
            batch_sizes,
            repetitions,
            warmup,
            out,
        } => {
            let timing = TimingConfig {
                batch_sizes: parse_list(&batch_sizes)?,
                seq_len,
                repetitions,
                warmup,
                seed,
            };
            bench(&source, model.as_deref(), &timing, out.as_deref(), manifest)
        }
        Command::Init { source, vocab, out } => init(&source, vocab.as_deref(), &out, seed, manifest),
        Command::Synth {
            out,
            records,
            malicious_fraction,
            context_dependent,
        } => {
            let config = SyntheticConfig {
                records,
                malicious_fraction,
                context_dependent,
                seed,
                ..SyntheticConfig::default()
            };
            synth(&config, &out, manifest)
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow!("invalid list item {p:?}: {e}")))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_records(path: &Path) -> Result<Vec<EmailRecord>> {
    let data = load_dataset(path, false)?;
    for e in &data.errors {
        log::warn!("{}: skipped line {}: {}", path.display(), e.line, e.message);
    }
    Ok(data.records)
}

fn model_config(source: &ModelSource, default: ModelConfig) -> Result<ModelConfig> {
    let mut config = match (&source.config, &source.preset) {
        (Some(path), _) => ModelConfig::load(path)?,
        (None, Some(name)) => ModelConfig::preset(name)?,
        (None, None) => default,
    };
    if let Some(plan) = &source.plan {
        config.plan = parse_plan(plan)?;
    }
    config.validate()?;
    Ok(config)
}

fn apply_encode(mut encode: EncodeOptions, args: &EncodeArgs) -> Result<EncodeOptions> {
    if let Some(n) = args.max_len {
        encode.max_len = n;
    }
    if let Some(t) = &args.truncate {
        encode.truncation = t.parse()?;
    }
    Ok(encode)
}

fn ingest(input: &Path, out: &Path, strict: bool, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let mut run = RunRecorder::new("ingest", seed);
    run.input(input);
    run.config(&json!({ "strict": strict }))?;
    let data = load_dataset(input, strict)?;
    for e in &data.errors {
        log::warn!("skipped line {}: {}", e.line, e.message);
    }
    let mut file = std::io::BufWriter::new(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?);
    for r in &data.records {
        let (context, warning) = extract_context(r);
        let line = json!({
            "id": r.id,
            "label": r.label,
            "group": r.group,
            "weight": r.weight(),
            "content": build_content(r),
            "context": context,
            "warning": warning.map(|w| w.0),
        });
        writeln!(file, "{}", serde_json::to_string(&line)?)?;
    }
    file.flush()?;
    drop(file);
    log::info!("ingested {} records, skipped {}", data.records.len(), data.errors.len());
    run.output(out);
    run.finish(manifest)?;
    Ok(())
}

fn split(input: &Path, out: &Path, fractions: &str, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let mut run = RunRecorder::new("split", seed);
    run.input(input);
    let spec = SplitSpec::parse(fractions)?;
    run.config(&spec)?;
    let splits = split_by_time(&load_records(input)?, &spec)?;
    create_dir(out)?;
    for (name, part) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
        write_dataset(out.join(format!("{name}.jsonl")), part)?;
        log::info!("{name}: {} records", part.len());
    }
    run.output(out);
    run.finish(manifest)?;
    Ok(())
}

/// Contents of a `train --config` file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    /// Model for fresh training; the tiny preset when absent.
    model: Option<ModelConfig>,
    train: TrainConfig,
    encode: EncodeOptions,
    zero_context: bool,
    baseline: LrConfig,
}

fn record_weight(record: &EmailRecord, prepare: &PrepareOptions) -> f32 {
    match (record.weight, &record.group) {
        (Some(w), _) => w,
        (None, Some(catbert_core::mail::Group::Bec)) => prepare.bec_weight,
        (None, _) => 1.0,
    }
}

fn train_cmd(args: &TrainArgs, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let mut run = RunRecorder::new("train", seed);
    let mut config: RunConfig = match &args.config {
        Some(path) => {
            run.input(path);
            read_json(path)?
        }
        None => RunConfig::default(),
    };
    config.train.seed = seed;
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.train.learning_rate = v;
    }
    if let Some(v) = &args.freeze {
        config.train.freeze = Some(v.clone());
    }
    config.zero_context |= args.zero_context;
    config.encode = apply_encode(config.encode, &args.encode)?;

    run.input(&args.data);
    let records = load_records(&args.data)?;
    let (train_records, validation) = match &args.validation {
        Some(path) => {
            run.input(path);
            (records, load_records(path)?)
        }
        None => {
            let s = split_by_time(&records, &SplitSpec::parse(&args.fractions)?)?;
            (s.train, s.validation)
        }
    };
    let prepare = PrepareOptions {
        encode: config.encode,
        bec_weight: config.train.bec_weight,
        zero_context: config.zero_context,
    };
    create_dir(&args.out)?;

    if args.baseline {
        let texts: Vec<String> = train_records.iter().map(build_content).collect();
        let labels: Vec<u8> = train_records.iter().map(|r| r.label).collect();
        let weights: Vec<f32> = train_records.iter().map(|r| record_weight(r, &prepare)).collect();
        let lr = TfidfLr::fit(&texts, &labels, &weights, config.baseline)?;
        let val_scores: Vec<f64> = validation.iter().map(|r| lr.predict(&build_content(r))).collect();
        let val_labels: Vec<u8> = validation.iter().map(|r| r.label).collect();
        let val_auc = catbert_core::eval::roc_auc(&val_scores, &val_labels).ok();
        lr.save(args.out.join(LR_FILE))?;
        write_json(&args.out.join("history.json"), &json!({ "val_auc": val_auc }))?;
        log::info!("baseline fitted on {} records, val auc {val_auc:?}", texts.len());
        run.config(&json!({ "baseline": config.baseline, "prepare": prepare, "fractions": args.fractions }))?;
    } else {
        let vocab_path = match (&args.vocab, &args.init) {
            (Some(p), _) => p.clone(),
            (None, Some(dir)) => dir.join(VOCAB_FILE),
            (None, None) => bail!("training needs --vocab (or an --init checkpoint holding {VOCAB_FILE})"),
        };
        run.input(&vocab_path);
        let vocab = Vocabulary::load(&vocab_path)?;
        let mut model: Model = match &args.init {
            Some(dir) => {
                run.input(dir.join(catbert_core::model::MANIFEST_FILE));
                run.input(dir.join(catbert_core::model::BLOB_FILE));
                load_checkpoint(dir)?
            }
            None => {
                let mut mc = config.model.clone().unwrap_or_else(|| ModelConfig::tiny(vocab.len()));
                if mc.vocab_size != vocab.len() {
                    log::info!("vocab_size {} replaced by the vocabulary's {}", mc.vocab_size, vocab.len());
                    mc.vocab_size = vocab.len();
                }
                mc.seed = seed;
                Model::init_random(&mc, seed)?
            }
        };
        if model.config().vocab_size != vocab.len() {
            bail!(
                "checkpoint expects {} tokens but {} has {}",
                model.config().vocab_size,
                vocab_path.display(),
                vocab.len()
            );
        }
        config.model = Some(model.config().clone());
        let train_set = prepare_examples(&train_records, &vocab, &prepare)?;
        let val_set = prepare_examples(&validation, &vocab, &prepare)?;
        let history = train(&mut model, &train_set, &val_set, &config.train, Some(&args.out))?;
        vocab.save(args.out.join(VOCAB_FILE))?;
        Pipeline { prepare }.save(&args.out)?;
        write_json(&args.out.join("history.json"), &history)?;
        run.config(&json!({ "run": config, "fractions": args.fractions }))?;
    }
    run.output(&args.out);
    run.finish(manifest)?;
    Ok(())
}

fn copy_if_present(from: &Path, to: &Path, name: &str) -> Result<()> {
    let src = from.join(name);
    if src.exists() {
        fs::copy(&src, to.join(name)).with_context(|| format!("copying {}", src.display()))?;
    }
    Ok(())
}

fn surgery(
    donor_dir: &Path,
    keep: &str,
    plan: Option<&str>,
    zero_adapters: bool,
    out: &Path,
    seed: u64,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut run = RunRecorder::new("surgery", seed);
    run.input(donor_dir);
    let keep: Vec<usize> = parse_list(keep)?;
    let donor: Model = load_checkpoint(donor_dir)?;
    let plan = match plan {
        Some(p) => parse_plan(p)?,
        None => keep.iter().flat_map(|_| [BlockKind::Transformer, BlockKind::Adapter]).collect(),
    };
    let config = ModelConfig {
        plan,
        zero_adapter_output: zero_adapters,
        seed,
        ..donor.config().clone()
    };
    run.config(&json!({ "keep": keep, "model": config }))?;
    let model = surgery_from_donor(&donor, &config, &keep, seed)?;
    create_dir(out)?;
    save_checkpoint(&model, out)?;
    copy_if_present(donor_dir, out, VOCAB_FILE)?;
    copy_if_present(donor_dir, out, crate::detector::PIPELINE_FILE)?;
    log::info!("kept donor transformers {keep:?} of {}", donor.config().transformers());
    run.output(out);
    run.finish(manifest)?;
    Ok(())
}

fn params(source: &ModelSource, as_json: bool, out: Option<&Path>, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let mut run = RunRecorder::new("params", seed);
    if let Some(p) = &source.config {
        run.input(p);
    }
    let config = model_config(source, ModelConfig::catbert())?;
    run.config(&config)?;
    let report = count_params(&config);
    let text = if as_json {
        serde_json::to_string_pretty(&report)? + "\n"
    } else {
        report.to_string()
    };
    match out {
        Some(path) => {
            fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            run.output(path);
        }
        None => print!("{text}"),
    }
    run.finish(manifest)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    models: &[PathBuf],
    data: &Path,
    vocab: Option<&Path>,
    fprs: &str,
    out: &Path,
    roc: Option<&Path>,
    batch_size: usize,
    seed: u64,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut run = RunRecorder::new("eval", seed);
    let fprs: Vec<f64> = parse_list(fprs)?;
    run.config(&json!({ "fprs": fprs, "models": models, "batch_size": batch_size }))?;
    run.input(data);
    let records = load_records(data)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let groups = records.iter().map(|r| r.group.clone()).collect::<Vec<_>>();
    let mut report: Option<MetricsReport> = None;
    let mut runs = Vec::new();
    for dir in models {
        let (detector, files) = Detector::load(dir, vocab)?;
        files.into_iter().for_each(|f| run.input(f));
        let scores = detector.score(&records, batch_size)?;
        let set = ScoreSet::new(scores, labels.clone(), groups.clone())?;
        let r = MetricsReport::build(&set, &fprs)?;
        if report.is_none() {
            if let Some(path) = roc {
                fs::write(path, roc_curve(&set.scores, &set.labels)?.to_csv())?;
                run.output(path);
            }
        }
        log::info!("{}: auc {:.6}", dir.display(), r.auc);
        runs.extend(r.runs.iter().cloned());
        report.get_or_insert(r);
    }
    let mut report = report.ok_or_else(|| anyhow!("no model given"))?;
    if runs.len() > 1 {
        report.aggregate = Some(aggregate(&runs));
    }
    report.runs = runs;
    write_json(out, &report)?;
    run.output(out);
    run.finish(manifest)?;
    Ok(())
}

/// Records for scoring; a missing label is read as benign.
fn load_unlabelled(path: &Path) -> Result<Vec<EmailRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if let Some(obj) = value.as_object_mut() {
            obj.entry("label").or_insert(json!(0));
        }
        records.push(serde_json::from_value(value).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(records)
}

fn predict(
    model: &Path,
    input: &Path,
    vocab: Option<&Path>,
    out: Option<&Path>,
    batch_size: usize,
    seed: u64,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut run = RunRecorder::new("predict", seed);
    run.config(&json!({ "batch_size": batch_size }))?;
    let (detector, files) = Detector::load(model, vocab)?;
    files.into_iter().for_each(|f| run.input(f));
    run.input(input);
    let records = load_unlabelled(input)?;
    let scores = detector.score(&records, batch_size)?;
    let mut text = String::new();
    for (r, p) in records.iter().zip(&scores) {
        text.push_str(&serde_json::to_string(&json!({ "id": r.id, "prob": p }))?);
        text.push('\n');
    }
    match out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            run.output(path);
        }
        None => print!("{text}"),
    }
    run.finish(manifest)?;
    Ok(())
}

fn attack_cmd(args: &AttackArgs, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let mut run = RunRecorder::new("attack", seed);
    let kind: AttackKind = args.kind.parse()?;
    let synonyms: BTreeMap<String, Vec<String>> = match &args.synonyms {
        Some(p) => {
            run.input(p);
            read_json(p)?
        }
        None => BTreeMap::new(),
    };
    if kind == AttackKind::Synonym && synonyms.is_empty() {
        log::warn!("synonym attack without a --synonyms table leaves texts unchanged");
    }
    let spec = AttackSpec {
        kind,
        rate: args.rate,
        seed,
        synonyms,
        homoglyphs: default_homoglyphs(),
    };
    let (detector, files) = Detector::load(&args.model, args.vocab.as_deref())?;
    files.into_iter().for_each(|f| run.input(f));
    run.input(&args.data);
    let records = load_records(&args.data)?;
    let threshold = match (args.threshold_fpr, &args.validation) {
        (Some(fpr), Some(path)) => {
            run.input(path);
            let val = load_records(path)?;
            let scores = detector.score(&val, args.batch_size)?;
            let labels: Vec<u8> = val.iter().map(|r| r.label).collect();
            threshold_at_fpr(&scores, &labels, fpr)?
        }
        _ => args.threshold,
    };
    run.config(&json!({ "spec": spec, "threshold": threshold, "batch_size": args.batch_size }))?;
    let report = detector.with_scorer(args.batch_size, |s| accuracy_under_attack(s, &records, &spec, threshold))?;
    log::info!(
        "{kind}: accuracy {:.4} -> {:.4} on {} records",
        report.clean_acc,
        report.attacked_acc,
        report.samples
    );
    write_json(&args.out, &report)?;
    run.output(&args.out);
    if let Some(path) = &args.samples_out {
        let mut text = String::new();
        for (r, clean, attacked) in attack_records(&records, &spec) {
            text.push_str(&serde_json::to_string(&json!({ "id": r.id, "clean": clean, "attacked": attacked }))?);
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        run.output(path);
    }
    run.finish(manifest)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn explain(
    model: &Path,
    data: &Path,
    record_id: &str,
    vocab: Option<&Path>,
    lime: &LimeConfig,
    out: &Path,
    batch_size: usize,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut run = RunRecorder::new("explain", lime.seed);
    run.config(&json!({ "record_id": record_id, "lime": lime }))?;
    let (detector, files) = Detector::load(model, vocab)?;
    files.into_iter().for_each(|f| run.input(f));
    let Detector::CatBert { model, vocab, pipeline } = &detector else {
        bail!("explain needs a CatBERT checkpoint, {} holds the baseline", model.display());
    };
    run.input(data);
    let record = load_records(data)?
        .into_iter()
        .find(|r| r.id.as_deref() == Some(record_id))
        .ok_or_else(|| anyhow!("no record with id {record_id:?} in {}", data.display()))?;
    let example = prepare_example(&record, vocab, &pipeline.prepare)?;
    let score = detector.score(std::slice::from_ref(&record), batch_size)?[0];
    let attribution = explain_example(model.as_ref(), vocab, &example, lime, batch_size)?;
    for (token, w) in &attribution.top_positive {
        log::info!("{token:>16} {w:+.4}");
    }
    write_json(out, &json!({ "record_id": record_id, "score": score, "attribution": attribution }))?;
    run.output(out);
    run.finish(manifest)?;
    Ok(())
}

fn bench(
    source: &ModelSource,
    checkpoint: Option<&Path>,
    timing: &TimingConfig,
    out: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut run = RunRecorder::new("bench", timing.seed);
    let model: Model = match checkpoint {
        Some(dir) => {
            run.input(dir);
            load_checkpoint(dir)?
        }
        None => {
            let config = model_config(source, ModelConfig::catbert())?;
            Model::init_random(&config, timing.seed)?
        }
    };
    run.config(&json!({ "model": model.config(), "timing": timing, "dtype": f32::DTYPE }))?;
    let report = time_inference(&model, timing)?;
    println!(
        "plan {}  params {:.1}M  seq_len {}",
        report.plan,
        report.params.total as f64 / 1e6,
        report.seq_len
    );
    for e in &report.entries {
        println!(
            "batch {:>4}  mean {:>10.3} ms  p50 {:>10.3} ms  p95 {:>10.3} ms",
            e.batch_size, e.mean_ms, e.p50_ms, e.p95_ms
        );
    }
    if let Some(path) = out {
        write_json(path, &report)?;
        run.output(path);
    }
    run.finish(manifest)?;
    Ok(())
}

fn init(source: &ModelSource, vocab: Option<&Path>, out: &Path, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let mut run = RunRecorder::new("init", seed);
    let mut config = model_config(source, ModelConfig::tiny(1000))?;
    config.seed = seed;
    if let Some(path) = vocab {
        run.input(path);
        config.vocab_size = Vocabulary::load(path)?.len();
    }
    run.config(&config)?;
    let model = Model::init_random(&config, seed)?;
    create_dir(out)?;
    save_checkpoint(&model, out)?;
    if let Some(path) = vocab {
        fs::copy(path, out.join(VOCAB_FILE)).with_context(|| format!("copying {}", path.display()))?;
    }
    run.output(out);
    run.finish(manifest)?;
    Ok(())
}

fn synth(config: &SyntheticConfig, out: &Path, manifest: Option<&Path>) -> Result<()> {
    let mut run = RunRecorder::new("synth", config.seed);
    run.config(config)?;
    let corpus = generate(config)?;
    create_dir(out)?;
    write_dataset(out.join("data.jsonl"), &corpus.records)?;
    corpus.vocabulary.save(out.join(VOCAB_FILE))?;
    write_json(&out.join("synonyms.json"), &corpus.synonyms)?;
    log::info!(
        "{} records, {} malicious, vocabulary of {}",
        corpus.records.len(),
        corpus.records.iter().filter(|r| r.label == 1).count(),
        corpus.vocabulary.len()
    );
    run.output(out);
    run.finish(manifest)?;
    Ok(())
}
