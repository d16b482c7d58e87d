//! Deterministic stand-in corpora in the on-disk formats the loaders read.
//!
//! Used by tests and demos when the real datasets are absent. The
//! questions follow category-typical templates, so a model can learn them,
//! but the numbers they produce say nothing about the real benchmarks.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Vocab, TREC_DEV_SIZE};
use crate::error::{DolfinError, Result};

const PEOPLE: &[&str] = &[
    "Lincoln",
    "Einstein",
    "Curie",
    "Darwin",
    "Newton",
    "Gandhi",
    "Mozart",
    "Picasso",
    "Tesla",
    "Shakespeare",
];
const PLACES: &[&str] = &[
    "Paris", "Tokyo", "Peru", "Kenya", "Ohio", "the Nile", "Everest", "Sydney", "Iceland", "the Alps",
];
const THINGS: &[&str] = &[
    "telephone",
    "bicycle",
    "vaccine",
    "radio",
    "compass",
    "piano",
    "telescope",
    "camera",
    "engine",
    "battery",
];
const ANIMALS: &[&str] = &["whale", "tiger", "eagle", "frog", "shark", "camel", "owl", "wolf"];
const CONCEPTS: &[&str] = &[
    "gravity",
    "democracy",
    "photosynthesis",
    "inflation",
    "erosion",
    "evolution",
    "entropy",
    "irony",
];
const ACRONYMS: &[&str] = &["NASA", "UN", "DNA", "CPU", "BBC", "FBI", "NATO", "HTML", "AIDS", "UFO"];

/// One `COARSE:fine text` line from a category template.
fn question<R: Rng>(category: usize, rng: &mut R) -> String {
    let p = PEOPLE.choose(rng).unwrap();
    let l = PLACES.choose(rng).unwrap();
    let t = THINGS.choose(rng).unwrap();
    let a = ANIMALS.choose(rng).unwrap();
    let c = CONCEPTS.choose(rng).unwrap();
    let x = ACRONYMS.choose(rng).unwrap();
    let options: Vec<(&str, String)> = match category {
        0 => vec![
            ("abb", format!("What is the abbreviation for {c} ?")),
            ("exp", format!("What does {x} stand for ?")),
            ("exp", format!("What is the full form of {x} ?")),
            ("abb", format!("What is the short form of {t} ?")),
        ],
        1 => vec![
            ("def", format!("What is {c} ?")),
            ("desc", format!("How does a {t} work ?")),
            ("reason", format!("Why do people study {c} ?")),
            ("manner", format!("How can I describe {c} ?")),
            ("def", format!("What does {c} mean ?")),
        ],
        2 => vec![
            ("animal", format!("What {a} lives near {l} ?")),
            ("product", format!("What brand of {t} did {p} use ?")),
            ("other", format!("What kind of {t} is best ?")),
            ("animal", format!("Which animal is larger than a {a} ?")),
            ("food", format!("What food do {a}s eat ?")),
        ],
        3 => vec![
            ("ind", format!("Who invented the {t} ?")),
            ("ind", format!("Who was {p} ?")),
            ("gr", format!("What company makes the {t} ?")),
            ("ind", format!("Who discovered {c} ?")),
            ("ind", format!("Which person first visited {l} ?")),
        ],
        4 => vec![
            ("other", format!("Where is {l} ?")),
            ("city", format!("What city is near {l} ?")),
            ("country", format!("In what country did {p} live ?")),
            ("other", format!("Where was the {t} invented ?")),
            ("country", format!("What country is {l} in ?")),
        ],
        _ => vec![
            ("count", format!("How many {a}s live in {l} ?")),
            ("date", format!("When was the {t} invented ?")),
            ("date", format!("When did {p} die ?")),
            ("dist", format!("How far is {l} from {l} ?")),
            ("money", format!("How much does a {t} cost ?")),
        ],
    };
    let (fine, text) = options.choose(rng).unwrap().clone();
    format!("{}:{fine} {text}", crate::data::TREC_LABELS[category])
}

fn trec_lines(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..n)
        .map(|_| {
            // Skewed like the real label distribution: few ABBR questions.
            let category = match rng.gen_range(0..100) {
                0..=2 => 0,
                3..=22 => 1,
                23..=44 => 2,
                45..=66 => 3,
                67..=81 => 4,
                _ => 5,
            };
            question(category, rng)
        })
        .collect()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| DolfinError::io(path, e))?;
    for line in lines {
        writeln!(f, "{line}").map_err(|e| DolfinError::io(path, e))?;
    }
    Ok(())
}

/// Writes `root/trec/train_5500.label` (`train + 452` questions, so that
/// the dev suffix has its usual size) and `root/trec/TREC_10.label`.
pub fn write_trec(root: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    let dir = root.join("trec");
    fs::create_dir_all(&dir).map_err(|e| DolfinError::io(&dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    write_lines(
        &dir.join("train_5500.label"),
        &trec_lines(train + TREC_DEV_SIZE, &mut rng),
    )?;
    write_lines(&dir.join("TREC_10.label"), &trec_lines(test, &mut rng))
}

/// Writes `word v1 .. v_dim` lines for every vocabulary word except the
/// reserved ones, leaving out every `skip_every`-th word (0 keeps all).
pub fn write_embeddings(path: &Path, vocab: &Vocab, dim: usize, skip_every: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = fs::File::create(path).map_err(|e| DolfinError::io(path, e))?;
    for (i, word) in vocab.words().iter().enumerate().skip(2) {
        if skip_every > 0 && i % skip_every == 0 {
            continue;
        }
        let values: Vec<String> = (0..dim).map(|_| format!("{:.5}", rng.gen_range(-0.5..0.5))).collect();
        writeln!(f, "{word} {}", values.join(" ")).map_err(|e| DolfinError::io(path, e))?;
    }
    Ok(())
}
