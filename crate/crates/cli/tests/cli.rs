mod common;

use std::fs;

use common::{code, Fixture, BIN};
use serde_json::Value;

fn json(path: &std::path::Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn training_is_deterministic() {
    let fx = Fixture::new(200, 60);
    for dir in ["a", "b"] {
        fx.train(dir, &["--max-epochs", "2", "--seed", "9"]);
    }
    for file in ["metrics.json", "train.log", "model.ckpt"] {
        assert_eq!(
            fs::read(fx.path("a").join(file)).unwrap(),
            fs::read(fx.path("b").join(file)).unwrap(),
            "{file} differs"
        );
    }
    fx.train("c", &["--max-epochs", "2", "--seed", "10"]);
    assert_ne!(
        fs::read(fx.path("a/model.ckpt")).unwrap(),
        fs::read(fx.path("c/model.ckpt")).unwrap()
    );
}

#[test]
fn eval_reproduces_training_accuracy() {
    let fx = Fixture::new(200, 60);
    for model in ["cnn", "bilstm", "dolfin-conv", "dolfin-bilstm"] {
        let ck = fx.train(model, &["--model", model, "--max-epochs", "2"]);
        let metrics = json(&fx.path(model).join("metrics.json"));
        let out = fx.ok(&[
            "eval",
            "--dataset",
            "trec",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--json",
        ]);
        let report: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(report["accuracy"], metrics["test_accuracy"], "{model}");
        assert_eq!(report["total"], 60);
    }
}

#[test]
fn repeated_seeds_write_a_summary() {
    let fx = Fixture::new(120, 30);
    let out = fx.ok(&[
        "train",
        "--dataset",
        "trec",
        "--report-dir",
        "multi",
        "--quiet",
        "--max-epochs",
        "1",
        "--seed",
        "1,2,3",
        "--embed-dim",
        "8",
        "--filters-per-size",
        "2",
        "--text-dim",
        "4",
    ]);
    assert!(out.contains('±'), "{out}");
    for s in 1..=3 {
        assert!(fx.path(&format!("multi/model-seed{s}.ckpt")).exists());
        assert!(fx.path(&format!("multi/metrics-seed{s}.json")).exists());
    }
    let summary = json(&fx.path("multi/summary.json"));
    assert_eq!(summary["test_accuracy"]["values"].as_array().unwrap().len(), 3);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let fx = Fixture::new(120, 30);
    let ck = fx.train("run", &["--max-epochs", "1"]);
    let mut bytes = fs::read(&ck).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&ck, &bytes).unwrap();
    let out = fx.run(&["eval", "--dataset", "trec", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));

    fs::write(&ck, b"DOLFINCK").unwrap();
    let out = fx.run(&["eval", "--dataset", "trec", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn mismatched_dataset_or_model_is_reported() {
    let fx = Fixture::new(120, 30);
    let ck = fx.train("run", &["--max-epochs", "1"]);
    let ck = ck.to_str().unwrap();
    let out = fx.run(&["eval", "--dataset", "sst2", "--checkpoint", ck]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));

    let out = fx.run(&["eval", "--dataset", "trec", "--subsample", "50", "--checkpoint", ck]);
    assert_eq!(code(&out), 2);

    let out = fx.run(&["eval", "--dataset", "trec", "--model", "cnn", "--checkpoint", ck]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dolfin-conv"));
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let fx = Fixture::new(120, 30);
    fs::write(
        fx.path("run.conf"),
        "# small run\ndataset = trec\nmax_epochs = 1\nembed_dim = 8\ntext_dim = 4\nfilters_per_size = 2\nseed = 4\nquiet = true\n",
    )
    .unwrap();
    let out = fx.ok(&["train", "--config", "run.conf", "--report-dir", "cfg", "--seed", "6"]);
    assert!(!out.contains("epoch 0"), "quiet from the file is ignored: {out}");
    let metrics = json(&fx.path("cfg/metrics.json"));
    assert_eq!(metrics["seed"], 6);
    assert_eq!(metrics["config"]["embed_dim"], 8);
    assert_eq!(metrics["training"]["max_epochs"], 1);

    fs::write(fx.path("bad.conf"), "no equals sign\n").unwrap();
    assert_eq!(code(&fx.run(&["train", "--config", "bad.conf"])), 1);
    assert_eq!(code(&fx.run(&["train", "--config", "missing.conf"])), 1);
}

#[test]
fn interpret_report_is_reproducible() {
    let fx = Fixture::new(200, 60);
    let ck = fx.train("run", &["--max-epochs", "2", "--d", "7"]);
    let ck = ck.to_str().unwrap();
    for dir in ["r1", "r2"] {
        fx.ok(&[
            "interpret",
            "--dataset",
            "trec",
            "--checkpoint",
            ck,
            "--example",
            "3",
            "--report-dir",
            dir,
        ]);
    }
    for file in ["report.html", "support_table.json", "word_support.json"] {
        assert_eq!(
            fs::read(fx.path("r1").join(file)).unwrap(),
            fs::read(fx.path("r2").join(file)).unwrap(),
            "{file} differs"
        );
    }
    let table = json(&fx.path("r1/support_table.json"));
    assert_eq!(table["q"].as_array().unwrap().len(), 6);
    assert_eq!(table["q"][0].as_array().unwrap().len(), 7);
    let html = fs::read_to_string(fx.path("r1/report.html")).unwrap();
    assert!(html.starts_with("<!DOCTYPE html>"));
    assert!(html.trim_end().ends_with("</html>"));
}

#[test]
fn interpret_free_text_in_ansi() {
    let fx = Fixture::new(120, 30);
    let ck = fx.train("run", &["--max-epochs", "1"]);
    let ck = ck.to_str().unwrap();
    let out = fx.ok(&[
        "interpret",
        "--dataset",
        "trec",
        "--checkpoint",
        ck,
        "--text",
        "Who invented the telephone ?",
        "--format",
        "ansi",
        "--report-dir",
        "ansi",
    ]);
    assert!(out.contains("\x1b["));
    assert!(out.contains("telephone"));
    let ws = json(&fx.path("ansi/word_support.json"));
    assert_eq!(ws["support"]["tokens"].as_array().unwrap().len(), 5);

    let out = fx.run(&["interpret", "--dataset", "trec", "--checkpoint", ck, "--text", "  "]);
    assert_eq!(code(&out), 1);
    let out = fx.run(&["interpret", "--dataset", "trec", "--checkpoint", ck, "--delta", "1.5"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn higher_delta_never_adds_firings() {
    let fx = Fixture::new(200, 60);
    let ck = fx.train("run", &["--max-epochs", "2"]);
    let ck = ck.to_str().unwrap();
    let mut previous: Option<Vec<u64>> = None;
    for delta in ["0", "0.25", "0.5", "0.75", "1"] {
        let dir = format!("d{delta}");
        fx.ok(&[
            "interpret",
            "--dataset",
            "trec",
            "--checkpoint",
            ck,
            "--delta",
            delta,
            "--report-dir",
            &dir,
        ]);
        let counts: Vec<u64> = json(&fx.path(&dir).join("support_table.json"))["counts"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|row| {
                row.as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_u64().unwrap())
                    .collect::<Vec<_>>()
            })
            .collect();
        if let Some(prev) = &previous {
            assert!(
                counts.iter().zip(prev).all(|(now, before)| now <= before),
                "delta {delta}"
            );
        }
        previous = Some(counts);
    }
    assert!(previous.unwrap().iter().all(|&c| c == 0), "r never exceeds 1");
}

#[test]
fn baseline_checkpoints_cannot_be_interpreted() {
    let fx = Fixture::new(120, 30);
    let ck = fx.train("run", &["--model", "cnn", "--max-epochs", "1"]);
    let out = fx.run(&["interpret", "--dataset", "trec", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_lists_every_check_once() {
    let out = std::process::Command::new(BIN)
        .args(["gradcheck", "--seeds", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8(out.stdout).unwrap();
    for name in dolfin::gradcheck::SUITE_OPS {
        let hits = stdout
            .lines()
            .filter(|l| l.split_whitespace().next() == Some(name))
            .count();
        assert_eq!(hits, 1, "{name}");
    }
}

#[test]
fn gradcheck_catches_a_corrupted_backward() {
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(BIN)
        .args([
            "gradcheck",
            "--seeds",
            "1",
            "--only",
            "matmul,relu",
            "--corrupt-op",
            "relu",
        ])
        .arg("--report-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    let report = json(&dir.path().join("gradcheck.json"));
    let checks = report["checks"].as_array().unwrap();
    let passed = |n: &str| {
        checks.iter().find(|c| c["name"] == n).unwrap()["passed"]
            .as_bool()
            .unwrap()
    };
    assert!(!passed("relu"));
    assert!(passed("matmul"));
}

#[test]
fn exit_codes() {
    let fx = Fixture::new(60, 20);
    assert_eq!(code(&fx.run(&[])), 1);
    assert_eq!(code(&fx.run(&["--help"])), 0);
    assert_eq!(code(&fx.run(&["train", "--dataset", "nope"])), 1);
    assert_eq!(code(&fx.run(&["gradcheck", "--only", "no-such-op"])), 1);
    assert_eq!(
        code(&fx.run(&["eval", "--dataset", "trec", "--checkpoint", "missing.ckpt"])),
        2
    );

    let empty = tempfile::tempdir().unwrap();
    let out = common::run_in(empty.path(), &["train", "--dataset", "trec"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    let out = std::process::Command::new(BIN)
        .args(["train", "--dataset", "trec"])
        .env_remove("DOLFIN_DATA_DIR")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);

    let out = fx.run(&[
        "train",
        "--dataset",
        "trec",
        "--lr",
        "1e30",
        "--max-epochs",
        "3",
        "--report-dir",
        "nan",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
