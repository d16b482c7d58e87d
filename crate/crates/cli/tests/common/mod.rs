#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

pub const BIN: &str = env!("CARGO_BIN_EXE_dolfin");

/// Small model flags that keep a training run well under a second.
pub const SMALL: &[&str] = &[
    "--embed-dim",
    "16",
    "--filters-per-size",
    "4",
    "--lstm-hidden",
    "6",
    "--text-dim",
    "8",
];

/// Temporary directory holding a synthetic `trec/` corpus.
pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    pub fn new(train: usize, test: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        dolfin::synthetic::write_trec(dir.path(), train, test, 5).unwrap();
        Self { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs the binary with `--data-dir` pointing at the fixture.
    pub fn run(&self, args: &[&str]) -> Output {
        run_in(self.dir.path(), args)
    }

    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "dolfin {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Trains a small model into `report_dir` and returns its checkpoint.
    pub fn train(&self, report_dir: &str, extra: &[&str]) -> PathBuf {
        let mut args = vec!["train", "--dataset", "trec", "--report-dir", report_dir, "--quiet"];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(extra);
        self.ok(&args);
        self.path(report_dir).join("model.ckpt")
    }
}

pub fn run_in(data_dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(data_dir)
        .env("DOLFIN_DATA_DIR", data_dir)
        .env_remove("NO_COLOR")
        .output()
        .unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}
