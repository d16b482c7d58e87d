//! Library-level runs over a generated corpus: load, train, checkpoint,
//! interpret.

use dolfin::data::{self, DatasetKind};
use dolfin::interpret::{self, Format};
use dolfin::training::{self, encode_split, TrainConfig};
use dolfin::{checkpoint, Architecture, Classifier, ModelConfig};

fn corpus() -> (tempfile::TempDir, data::Dataset) {
    let dir = tempfile::tempdir().unwrap();
    dolfin::synthetic::write_trec(dir.path(), 400, 120, 3).unwrap();
    let ds = data::load_dataset(DatasetKind::Trec, dir.path()).unwrap();
    (dir, ds)
}

fn small(arch: Architecture, vocab: usize, d: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        filters_per_size: 8,
        lstm_hidden: 8,
        latent_features: d,
        text_dim: 16,
        ..ModelConfig::new(arch, vocab, 6)
    }
}

#[test]
fn every_architecture_learns_the_stand_in_task() {
    let (_dir, ds) = corpus();
    let vocab = ds.build_vocab();
    let train = encode_split(&vocab, &ds.train);
    let dev = encode_split(&vocab, &ds.dev);
    let majority = {
        let mut counts = [0usize; 6];
        for e in &dev {
            counts[e.label] += 1;
        }
        *counts.iter().max().unwrap() as f64 / dev.len() as f64
    };
    let cfg = TrainConfig {
        lr: 0.01,
        max_epochs: 15,
        patience: 15,
        ..TrainConfig::default()
    };
    for arch in Architecture::ALL {
        let mut model = Classifier::<f32>::new(small(arch, vocab.len(), 10), None, 2).unwrap();
        let history = training::train(&mut model, &train, &dev, &cfg).unwrap();
        let acc = training::evaluate_accuracy(&model, &dev).unwrap();
        assert_eq!(acc, history.best_dev_accuracy, "{arch}: best parameters are restored");
        assert!(acc > majority + 0.3, "{arch}: dev accuracy {acc} vs majority {majority}");
    }
}

#[test]
fn checkpoint_then_interpret() {
    let (dir, ds) = corpus();
    let vocab = ds.build_vocab();
    let train = encode_split(&vocab, &ds.train);
    let dev = encode_split(&vocab, &ds.dev);
    let mut model = Classifier::<f64>::new(small(Architecture::DolfinBilstm, vocab.len(), 20), None, 4).unwrap();
    let cfg = TrainConfig {
        lr: 0.01,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    training::train(&mut model, &train, &dev, &cfg).unwrap();
    model.params_mut().quantize_f32();

    let path = dir.path().join("ck/model.ckpt");
    checkpoint::save(&path, &model, "trec", &ds.labels, &vocab).unwrap();
    let loaded = checkpoint::load::<f64>(&path).unwrap();
    loaded.header.check_compatible("trec", Some(Architecture::DolfinBilstm), Some(&vocab)).unwrap();
    assert_eq!(
        training::predict_labels(&loaded.model, &dev).unwrap(),
        training::predict_labels(&model, &dev).unwrap()
    );

    let corpus: Vec<Vec<usize>> = dev.iter().map(|e| e.tokens.clone()).collect();
    let table = interpret::estimate_feature_support(&loaded.model, &corpus, 0.5, &ds.labels).unwrap();
    assert_eq!((table.num_classes(), table.num_features()), (6, 20));
    let example = &ds.dev[0];
    let ws = interpret::word_support(&loaded.model, &table, &example.tokens, &corpus[0]).unwrap();
    for row in &ws.support {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let html = interpret::render_report(&ws, &table, Format::Html).unwrap();
    assert!(html.contains(&ds.labels[ws.predicted]));
    let ansi = interpret::strip_ansi(&interpret::render_report(&ws, &table, Format::Ansi).unwrap());
    for token in &example.tokens {
        assert!(ansi.contains(token.as_str()), "{token}");
    }
}
