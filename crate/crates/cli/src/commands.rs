use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dolfin::checkpoint::{self, CheckpointHeader};
use dolfin::data::{self, Dataset, DatasetKind, Split};
use dolfin::gradcheck::{self, SUITE_OPS};
use dolfin::interpret::{self, Format};
use dolfin::training::{self, encode_split, EpochRecord, RunSummary, TrainConfig, TrainHistory};
use dolfin::{Architecture, Classifier, ModelConfig, Scalar, Tensor};

use crate::args::{DataArgs, EvalArgs, GradcheckArgs, InterpretArgs, Precision, TrainArgs};
use crate::{NumericFailure, UsageError};

fn load_data(args: &DataArgs) -> Result<(Dataset, String)> {
    let kind: DatasetKind = args.dataset.into();
    let root = data::resolve_data_dir(args.data_dir.as_deref()).ok_or_else(|| {
        UsageError(format!(
            "no data directory: pass --data-dir or set {}",
            data::DATA_DIR_ENV
        ))
    })?;
    let mut ds = data::load_dataset(kind, &root)?;
    if let Some(n) = args.subsample {
        ds = data::subsample(&ds, n)?;
    }
    Ok((ds, dataset_name(args)))
}

/// `kind`, or `kind@N` for a subsample of N training examples.
fn dataset_name(args: &DataArgs) -> String {
    let kind: DatasetKind = args.dataset.into();
    match args.subsample {
        Some(n) => format!("{kind}@{n}"),
        None => kind.to_string(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        dolfin::DolfinError::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| {
        dolfin::DolfinError::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

// ---------------------------------------------------------------------------
// train

#[derive(Serialize)]
struct Metrics<'a> {
    dataset: &'a str,
    model: Architecture,
    seed: u64,
    precision: &'static str,
    embeddings: EmbeddingInfo,
    config: &'a ModelConfig,
    training: &'a TrainConfig,
    sizes: Sizes,
    history: &'a TrainHistory,
    dev_accuracy: f64,
    test_accuracy: f64,
    checkpoint: String,
}

#[derive(Clone, Serialize)]
struct EmbeddingInfo {
    source: String,
    coverage: Option<f64>,
}

#[derive(Clone, Copy, Serialize)]
struct Sizes {
    train: usize,
    dev: usize,
    test: usize,
    vocab: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    dataset: &'a str,
    model: Architecture,
    seeds: &'a [u64],
    dev_accuracy: RunSummary,
    test_accuracy: RunSummary,
}

fn checkpoint_path(args: &TrainArgs, seed: u64) -> PathBuf {
    let base = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.report_dir.join("model.ckpt"));
    if args.seed.len() <= 1 {
        return base;
    }
    let stem = base
        .file_stem()
        .map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let name = match base.extension() {
        Some(ext) => format!("{stem}-seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-seed{seed}"),
    };
    base.with_file_name(name)
}

fn suffix(args: &TrainArgs, seed: u64) -> String {
    if args.seed.len() <= 1 {
        String::new()
    } else {
        format!("-seed{seed}")
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    if args.seed.is_empty() {
        bail!(UsageError("at least one seed is required".into()));
    }
    let (ds, name) = load_data(&args.data)?;
    let kind: DatasetKind = args.data.dataset.into();
    let vocab = ds.build_vocab();
    let architecture: Architecture = args.model.into();
    let config = ModelConfig {
        embed_dim: args.embed_dim,
        filter_sizes: args.filter_sizes.clone(),
        filters_per_size: args.filters_per_size,
        lstm_hidden: args.lstm_hidden,
        latent_features: args.d.unwrap_or_else(|| kind.default_latent_features()),
        text_dim: args.text_dim,
        dropout: args.dropout,
        ..ModelConfig::new(architecture, vocab.len(), ds.num_classes())
    };
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    create_dir(&args.report_dir)?;

    let mut dev_scores = Vec::new();
    let mut test_scores = Vec::new();
    for &seed in &args.seed {
        let train_cfg = TrainConfig {
            lr: args.lr,
            batch_size: args.batch_size,
            patience: args.patience,
            max_epochs: args.max_epochs,
            seed,
        };
        train_cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        let (dev, test) = match args.precision {
            Precision::F32 => train_seed::<f32>(args, &ds, &name, &vocab, &config, &train_cfg)?,
            Precision::F64 => train_seed::<f64>(args, &ds, &name, &vocab, &config, &train_cfg)?,
        };
        dev_scores.push(dev);
        test_scores.push(test);
    }
    if args.seed.len() > 1 {
        let summary = Summary {
            dataset: &name,
            model: architecture,
            seeds: &args.seed,
            dev_accuracy: RunSummary::new(dev_scores)?,
            test_accuracy: RunSummary::new(test_scores)?,
        };
        println!(
            "{name} {architecture} over {} seeds: dev {} test {}",
            args.seed.len(),
            summary.dev_accuracy,
            summary.test_accuracy
        );
        let json = serde_json::to_string_pretty(&summary)? + "\n";
        write_file(&args.report_dir.join("summary.json"), json.as_bytes())?;
    }
    Ok(())
}

fn embeddings<T: Scalar>(
    args: &TrainArgs,
    vocab: &data::Vocab,
    seed: u64,
) -> Result<(Option<Tensor<T>>, EmbeddingInfo)> {
    let Some(path) = &args.glove else {
        return Ok((
            None,
            EmbeddingInfo {
                source: "random".into(),
                coverage: None,
            },
        ));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = data::load_glove_subset(path, vocab, args.embed_dim, &mut rng)?;
    let info = EmbeddingInfo {
        source: path
            .file_name()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        coverage: Some(m.coverage()),
    };
    Ok((Some(m.matrix.cast()), info))
}

fn train_seed<T: Scalar>(
    args: &TrainArgs,
    ds: &Dataset,
    name: &str,
    vocab: &data::Vocab,
    config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let seed = cfg.seed;
    let (table, info) = embeddings::<T>(args, vocab, seed)?;
    let mut model = Classifier::<T>::new(config.clone(), table, seed)?;
    let train_set = encode_split(vocab, &ds.train);
    let dev_set = encode_split(vocab, &ds.dev);
    let test_set = encode_split(vocab, &ds.test);

    let sfx = suffix(args, seed);
    let log_path = args.report_dir.join(format!("train{sfx}.log"));
    let mut log = fs::File::create(&log_path).map_err(|e| dolfin::DolfinError::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let quiet = args.quiet;
    let mut log_err = None;
    let history = training::train_with_log(&mut model, &train_set, &dev_set, cfg, |r: &EpochRecord| {
        let line = format!(
            "seed {seed} epoch {} train_loss {:.6} dev_acc {:.4} best_dev_acc {:.4}",
            r.epoch, r.train_loss, r.dev_accuracy, r.best_dev_accuracy
        );
        if !quiet {
            println!("{line}");
        }
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(dolfin::DolfinError::Io {
            path: log_path,
            source: e,
        }
        .into());
    }
    // Report what the checkpoint will reproduce.
    model.params_mut().quantize_f32();
    let dev_accuracy = training::evaluate_accuracy(&model, &dev_set)?;
    let test_accuracy = training::evaluate_accuracy(&model, &test_set)?;

    let ckpt = checkpoint_path(args, seed);
    checkpoint::save(&ckpt, &model, name, &ds.labels, vocab)?;
    let metrics = Metrics {
        dataset: name,
        model: config.architecture,
        seed,
        precision: T::NAME,
        embeddings: info,
        config,
        training: cfg,
        sizes: Sizes {
            train: ds.train.len(),
            dev: ds.dev.len(),
            test: ds.test.len(),
            vocab: vocab.len(),
        },
        history: &history,
        dev_accuracy,
        test_accuracy,
        checkpoint: ckpt
            .file_name()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
    };
    let json = serde_json::to_string_pretty(&metrics)? + "\n";
    write_file(&args.report_dir.join(format!("metrics{sfx}.json")), json.as_bytes())?;
    writeln!(log, "seed {seed} dev_acc {dev_accuracy:.4} test_acc {test_accuracy:.4}").map_err(|e| {
        dolfin::DolfinError::Io {
            path: log_path,
            source: e,
        }
    })?;
    println!("seed {seed} dev accuracy {dev_accuracy:.4} test accuracy {test_accuracy:.4}");
    Ok((dev_accuracy, test_accuracy))
}

// ---------------------------------------------------------------------------
// eval / interpret

enum Loaded {
    F32(Classifier<f32>),
    F64(Classifier<f64>),
}

fn open_checkpoint(path: &Path, precision: Option<Precision>) -> Result<(CheckpointHeader, Loaded)> {
    let ck = checkpoint::load::<f64>(path)?;
    let precision = precision.unwrap_or(if ck.header.precision == "f64" {
        Precision::F64
    } else {
        Precision::F32
    });
    let model = match precision {
        Precision::F32 => Loaded::F32(ck.model.cast()),
        Precision::F64 => Loaded::F64(ck.model),
    };
    Ok((ck.header, model))
}

/// Loads the data and checks it against the checkpoint header.
fn matching_data(data: &DataArgs, header: &CheckpointHeader, model: Option<Architecture>) -> Result<Dataset> {
    header.check_compatible(&dataset_name(data), model, None)?;
    let (ds, name) = load_data(data)?;
    header.check_compatible(&name, model, Some(&ds.build_vocab()))?;
    Ok(ds)
}

#[derive(Serialize)]
struct EvalReport {
    dataset: String,
    split: Split,
    accuracy: f64,
    correct: usize,
    total: usize,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (header, model) = open_checkpoint(&args.checkpoint, args.precision)?;
    let ds = matching_data(&args.data, &header, args.model.map(Into::into))?;
    let split: Split = args.split.into();
    let encoded = encode_split(&header.vocab, ds.split(split));
    let predicted = match &model {
        Loaded::F32(m) => training::predict_labels(m, &encoded)?,
        Loaded::F64(m) => training::predict_labels(m, &encoded)?,
    };
    let gold: Vec<usize> = encoded.iter().map(|e| e.label).collect();
    let correct = predicted.iter().zip(&gold).filter(|(p, g)| p == g).count();
    let report = EvalReport {
        dataset: header.dataset.clone(),
        split,
        accuracy: training::accuracy(&predicted, &gold),
        correct,
        total: gold.len(),
    };
    if report.total == 0 {
        bail!(dolfin::DolfinError::Empty(format!("{:?} split is empty", split)));
    }
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!(
            "{} {:?} accuracy {:.4} ({}/{})",
            report.dataset, split, report.accuracy, report.correct, report.total
        );
    }
    Ok(())
}

pub fn interpret(args: &InterpretArgs) -> Result<()> {
    let (header, model) = open_checkpoint(&args.checkpoint, None)?;
    if !header.architecture.is_dolfin() {
        bail!(UsageError(format!(
            "{} has no latent features; interpret needs dolfin-conv or dolfin-bilstm",
            header.architecture
        )));
    }
    if !(0.0..=1.0).contains(&args.delta) {
        bail!(UsageError(format!("delta {} outside [0, 1]", args.delta)));
    }
    let ds = matching_data(&args.data, &header, None)?;
    let (tokens, raw) = match &args.text {
        Some(text) => (data::tokenize(text), text.clone()),
        None => {
            let ex = ds.dev.get(args.example).ok_or_else(|| {
                UsageError(format!(
                    "dev split has {} examples, index {} requested",
                    ds.dev.len(),
                    args.example
                ))
            })?;
            (ex.tokens.clone(), ex.raw.clone())
        }
    };
    if tokens.is_empty() {
        bail!(UsageError("input text is empty".into()));
    }
    let indices = header.vocab.encode(&tokens);
    let corpus: Vec<Vec<usize>> = ds.dev.iter().map(|e| header.vocab.encode(&e.tokens)).collect();
    let (table, ws) = match &model {
        Loaded::F32(m) => support(m, &corpus, args.delta, &header.labels, &tokens, &indices)?,
        Loaded::F64(m) => support(m, &corpus, args.delta, &header.labels, &tokens, &indices)?,
    };
    let format: Format = args.format.into();
    let report = interpret::render_report(&ws, &table, format)?;

    create_dir(&args.report_dir)?;
    let table_json = serde_json::to_string_pretty(&table)? + "\n";
    write_file(&args.report_dir.join("support_table.json"), table_json.as_bytes())?;
    let words_json = serde_json::to_string_pretty(&WordsReport {
        text: &raw,
        support: &ws,
    })? + "\n";
    write_file(&args.report_dir.join("word_support.json"), words_json.as_bytes())?;
    let file = match format {
        Format::Html => "report.html",
        Format::Ansi => "report.ansi",
    };
    write_file(&args.report_dir.join(file), report.as_bytes())?;
    if format == Format::Ansi {
        print!("{report}");
    } else {
        println!("wrote {}", args.report_dir.join(file).display());
    }
    Ok(())
}

#[derive(Serialize)]
struct WordsReport<'a> {
    text: &'a str,
    support: &'a interpret::WordSupport,
}

fn support<T: Scalar>(
    model: &Classifier<T>,
    corpus: &[Vec<usize>],
    delta: f64,
    labels: &[String],
    tokens: &[String],
    indices: &[usize],
) -> Result<(interpret::FeatureSupportTable, interpret::WordSupport)> {
    let table = interpret::estimate_feature_support(model, corpus, delta, labels)?;
    let ws = interpret::word_support(model, &table, tokens, indices)?;
    Ok((table, ws))
}

// ---------------------------------------------------------------------------
// gradcheck

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.seeds.is_empty() {
        bail!(UsageError("at least one seed is required".into()));
    }
    let fault = match &args.corrupt_op {
        Some(name) => {
            Some(gradcheck::op_kind_for(name).ok_or_else(|| UsageError(format!("'{name}' cannot be corrupted")))?)
        }
        None => None,
    };
    let names: Vec<&str> = if args.only.is_empty() {
        SUITE_OPS.to_vec()
    } else {
        for n in &args.only {
            if !SUITE_OPS.contains(&n.as_str()) {
                bail!(UsageError(format!("no gradient check named '{n}'")));
            }
        }
        args.only.iter().map(String::as_str).collect()
    };
    let report = gradcheck::run_checks(&names, &args.seeds, fault)?;
    println!(
        "gradient check: eps {:e}, tolerance {:e}, seeds {:?}",
        report.eps, report.tolerance, report.seeds
    );
    for c in &report.checks {
        println!(
            "{:<22} max_rel_err {:.3e}  checked {:>5}  skipped {:>3}  {}",
            c.name,
            c.report.max_rel_err,
            c.report.checked,
            c.report.skipped,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = &args.report_dir {
        create_dir(dir)?;
        let json = serde_json::to_string_pretty(&report)? + "\n";
        write_file(&dir.join("gradcheck.json"), json.as_bytes())?;
    }
    if !report.passed() {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        println!("FAIL ({} of {})", failed.len(), report.checks.len());
        bail!(NumericFailure(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    println!("PASS ({} checks)", report.checks.len());
    Ok(())
}
