//! Dataset loaders, tokenization, vocabularies and pretrained embeddings.
//!
//! Expected layout under a data root (see [`DATA_DIR_ENV`]):
//!
//! ```text
//! trec/train_5500.label   trec/TREC_10.label
//! sst2/train.tsv          sst2/dev.tsv          sst2/test.tsv
//! agnews/train.csv        agnews/test.csv
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DolfinError, Result};
use crate::tensor::Tensor;

/// Environment variable consulted when no data directory is given.
pub const DATA_DIR_ENV: &str = "DOLFIN_DATA_DIR";

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

pub const TREC_LABELS: [&str; 6] = ["ABBR", "DESC", "ENTY", "HUM", "LOC", "NUM"];
pub const SST2_LABELS: [&str; 2] = ["NEGATIVE", "POSITIVE"];
pub const AGNEWS_LABELS: [&str; 4] = ["WORLD", "SPORTS", "BUSINESS", "SCI-TECH"];

pub const TREC_DEV_SIZE: usize = 452;
pub const AGNEWS_DEV_SIZE: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Trec,
    Sst2,
    Agnews,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Trec => "trec",
            DatasetKind::Sst2 => "sst2",
            DatasetKind::Agnews => "agnews",
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            DatasetKind::Trec => &TREC_LABELS,
            DatasetKind::Sst2 => &SST2_LABELS,
            DatasetKind::Agnews => &AGNEWS_LABELS,
        }
    }

    /// Default number of latent features for this dataset.
    pub fn default_latent_features(self) -> usize {
        match self {
            DatasetKind::Trec => 20,
            DatasetKind::Sst2 => 10,
            DatasetKind::Agnews => 100,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = DolfinError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "trec" => Ok(DatasetKind::Trec),
            "sst2" | "sst-2" => Ok(DatasetKind::Sst2),
            "agnews" | "ag-news" | "ag_news" => Ok(DatasetKind::Agnews),
            other => Err(DolfinError::InvalidArgument(format!(
                "unknown dataset '{other}' (expected trec, sst2 or agnews)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<String>,
    pub label: usize,
    pub raw: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = DolfinError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DolfinError::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    /// Vocabulary over train, dev and test in that order.
    pub fn build_vocab(&self) -> Vocab {
        Vocab::build(
            self.train
                .iter()
                .chain(&self.dev)
                .chain(&self.test)
                .map(|e| e.tokens.as_slice()),
        )
    }
}

/// Mean token count.
pub fn average_length(examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let total: usize = examples.iter().map(|e| e.tokens.len()).sum();
    total as f64 / examples.len() as f64
}

// ---------------------------------------------------------------------------
// Tokenization

const BOUNDARY_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')', '`'];
const CLITICS: [&str; 6] = ["'s", "'re", "'ve", "'ll", "'d", "'m"];

fn is_clitic(tok: &str) -> bool {
    let lower = tok.to_lowercase();
    lower == "n't" || CLITICS.contains(&lower.as_str())
}

/// Whitespace tokenization after detaching boundary punctuation.
///
/// Rules, applied to each whitespace-separated chunk:
/// - `` `` `` and `''` are kept as single tokens;
/// - a chunk that is already a clitic (`n't`, `'s`, `'re`, ...) is kept;
/// - leading and trailing characters from `.,!?;:"'()`` ` are split off one
///   by one, except that a trailing `.` stays attached when the word already
///   contains a `.` (abbreviations such as `U.S.`);
/// - clitics are split from the remaining word: `wasn't` -> `was n't`,
///   `John's` -> `John 's`.
///
/// Case is preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        tokenize_chunk(chunk, &mut out);
    }
    out
}

fn tokenize_chunk(chunk: &str, out: &mut Vec<String>) {
    if chunk == "``" || chunk == "''" || is_clitic(chunk) {
        out.push(chunk.to_string());
        return;
    }
    let mut rest = chunk;
    loop {
        if let Some(r) = rest.strip_prefix("``") {
            out.push("``".into());
            rest = r;
        } else if let Some(c) = rest.chars().next().filter(|c| BOUNDARY_PUNCT.contains(c)) {
            // A leading apostrophe that starts a clitic-like word is kept.
            if c == '\'' && rest.len() > 1 && is_clitic(rest) {
                break;
            }
            out.push(c.to_string());
            rest = &rest[c.len_utf8()..];
        } else {
            break;
        }
    }
    let mut trailing = Vec::new();
    loop {
        if rest.is_empty() {
            break;
        }
        if let Some(r) = rest.strip_suffix("''") {
            trailing.push("''".to_string());
            rest = r;
            continue;
        }
        let c = rest.chars().next_back().unwrap();
        if !BOUNDARY_PUNCT.contains(&c) {
            break;
        }
        let body = &rest[..rest.len() - c.len_utf8()];
        if c == '.' && body.contains('.') && body.chars().any(char::is_alphanumeric) {
            break;
        }
        trailing.push(c.to_string());
        rest = body;
    }
    if !rest.is_empty() {
        split_clitic(rest, out);
    }
    out.extend(trailing.into_iter().rev());
}

fn split_clitic(word: &str, out: &mut Vec<String>) {
    let lower = word.to_lowercase();
    if lower.len() == word.len() {
        if lower.ends_with("n't") && word.len() > 3 {
            let cut = word.len() - 3;
            out.push(word[..cut].to_string());
            out.push(word[cut..].to_string());
            return;
        }
        for clitic in CLITICS {
            if lower.ends_with(clitic) && word.len() > clitic.len() {
                let cut = word.len() - clitic.len();
                out.push(word[..cut].to_string());
                out.push(word[cut..].to_string());
                return;
            }
        }
    }
    out.push(word.to_string());
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Word index with `0 = <pad>` and `1 = <unk>`; other words in order of
/// first appearance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from(vec![PAD.to_string(), UNK.to_string()])
    }
}

impl Vocab {
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut vocab = Self::default();
        for tokens in texts {
            for tok in tokens {
                vocab.insert(tok);
            }
        }
        vocab
    }

    /// Restores a vocabulary from its word list, validating the reserved slots.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[PAD_INDEX] != PAD || words[UNK_INDEX] != UNK {
            return Err(DolfinError::Checkpoint(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let vocab = Self::from(words);
        if vocab.index.len() != vocab.words.len() {
            return Err(DolfinError::Checkpoint("duplicate vocabulary entries".into()));
        }
        Ok(vocab)
    }

    pub fn insert(&mut self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), self.words.len() - 1);
        self.words.len() - 1
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 2
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t).unwrap_or(UNK_INDEX)).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .map(|&i| self.word(i).unwrap_or(UNK).to_string())
            .collect()
    }

    /// SHA-256 over the newline-joined word list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

// ---------------------------------------------------------------------------
// File helpers

/// Reads a text file as UTF-8, falling back to Latin-1 byte mapping.
pub fn read_text(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DolfinError::io(path, e))?;
    Ok(decode_bytes(bytes))
}

fn decode_bytes(bytes: Vec<u8>) -> String {
    match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => e.into_bytes().iter().map(|&b| b as char).collect(),
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> DolfinError {
    DolfinError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Resolves the data root: explicit path first, then [`DATA_DIR_ENV`].
pub fn resolve_data_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

// ---------------------------------------------------------------------------
// TREC

/// Parses `COARSE:fine question text` lines.
pub fn parse_trec_file(path: &Path) -> Result<Vec<Example>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (tag, question) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| parse_error(path, lineno, "expected 'LABEL:fine text'"))?;
        let (coarse, fine) = tag
            .split_once(':')
            .ok_or_else(|| parse_error(path, lineno, format!("label '{tag}' has no ':'")))?;
        if fine.is_empty() {
            return Err(parse_error(path, lineno, format!("label '{tag}' has no fine part")));
        }
        let label = TREC_LABELS
            .iter()
            .position(|&l| l == coarse)
            .ok_or_else(|| parse_error(path, lineno, format!("unknown category '{coarse}'")))?;
        let raw = question.trim().to_string();
        let tokens = tokenize(&raw);
        if tokens.is_empty() {
            return Err(parse_error(path, lineno, "empty question"));
        }
        out.push(Example { tokens, label, raw });
    }
    Ok(out)
}

/// Loads TREC from `dir/train_5500.label` and `dir/TREC_10.label`. The
/// last [`TREC_DEV_SIZE`] training questions form the dev split.
pub fn load_trec(dir: &Path) -> Result<Dataset> {
    let mut train = parse_trec_file(&dir.join("train_5500.label"))?;
    let test = parse_trec_file(&dir.join("TREC_10.label"))?;
    let dev = carve_suffix(&mut train, TREC_DEV_SIZE, dir)?;
    Ok(Dataset {
        kind: DatasetKind::Trec,
        labels: TREC_LABELS.iter().map(|s| s.to_string()).collect(),
        train,
        dev,
        test,
    })
}

fn carve_suffix(train: &mut Vec<Example>, n: usize, dir: &Path) -> Result<Vec<Example>> {
    if train.len() <= n {
        return Err(DolfinError::Empty(format!(
            "{}: {} training examples cannot supply a dev split of {}",
            dir.display(),
            train.len(),
            n
        )));
    }
    Ok(train.split_off(train.len() - n))
}

// ---------------------------------------------------------------------------
// SST-2

/// Parses `sentence<TAB>label` lines; a leading `sentence<TAB>label`
/// header is skipped.
pub fn parse_sst2_file(path: &Path) -> Result<Vec<Example>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (sentence, label) = line
            .rsplit_once('\t')
            .ok_or_else(|| parse_error(path, lineno, "expected 'sentence<TAB>label'"))?;
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            "label" if lineno == 1 => continue,
            other => return Err(parse_error(path, lineno, format!("unknown label '{other}'"))),
        };
        let raw = sentence.trim().to_string();
        let tokens = tokenize(&raw);
        if tokens.is_empty() {
            return Err(parse_error(path, lineno, "empty sentence"));
        }
        out.push(Example { tokens, label, raw });
    }
    Ok(out)
}

pub fn load_sst2(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        kind: DatasetKind::Sst2,
        labels: SST2_LABELS.iter().map(|s| s.to_string()).collect(),
        train: parse_sst2_file(&dir.join("train.tsv"))?,
        dev: parse_sst2_file(&dir.join("dev.tsv"))?,
        test: parse_sst2_file(&dir.join("test.tsv"))?,
    })
}

// ---------------------------------------------------------------------------
// AG news

/// Parses headerless `"class","title","description"` rows, class in 1..=4.
pub fn parse_agnews_file(path: &Path) -> Result<Vec<Example>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, e.to_string())
        })?;
        let lineno = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 3 {
            return Err(parse_error(path, lineno, "expected class, title, description"));
        }
        let class = record[0].trim();
        let label = match class.parse::<usize>() {
            Ok(c @ 1..=4) => c - 1,
            _ => return Err(parse_error(path, lineno, format!("class '{class}' outside 1..4"))),
        };
        let raw = format!("{} {}", record[1].trim(), record[2].trim());
        let tokens = tokenize(&raw);
        if tokens.is_empty() {
            return Err(parse_error(path, lineno, "empty title and description"));
        }
        out.push(Example { tokens, label, raw });
    }
    Ok(out)
}

/// Loads AG news. The last [`AGNEWS_DEV_SIZE`] training rows form the dev
/// split.
pub fn load_agnews(dir: &Path) -> Result<Dataset> {
    let mut train = parse_agnews_file(&dir.join("train.csv"))?;
    let test = parse_agnews_file(&dir.join("test.csv"))?;
    let dev = carve_suffix(&mut train, AGNEWS_DEV_SIZE, dir)?;
    Ok(Dataset {
        kind: DatasetKind::Agnews,
        labels: AGNEWS_LABELS.iter().map(|s| s.to_string()).collect(),
        train,
        dev,
        test,
    })
}

/// Fixed seed of the subsampling permutation.
pub const SUBSAMPLE_SEED: u64 = 0x5eed_a9e5;

/// Deterministic reduced copy: `n` training examples and `n / 10` dev
/// examples drawn by a fixed-seed permutation, kept in file order. The
/// test split is left whole.
pub fn subsample(dataset: &Dataset, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(DolfinError::InvalidArgument("subsample size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
    let train = pick(&dataset.train, n, &mut rng);
    let dev = pick(&dataset.dev, (n / 10).max(1), &mut rng);
    Ok(Dataset {
        train,
        dev,
        ..dataset.clone()
    })
}

fn pick<R: Rng>(examples: &[Example], n: usize, rng: &mut R) -> Vec<Example> {
    if n >= examples.len() {
        return examples.to_vec();
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| examples[i].clone()).collect()
}

pub fn load_dataset(kind: DatasetKind, root: &Path) -> Result<Dataset> {
    let dir = root.join(kind.as_str());
    match kind {
        DatasetKind::Trec => load_trec(&dir),
        DatasetKind::Sst2 => load_sst2(&dir),
        DatasetKind::Agnews => load_agnews(&dir),
    }
}

// ---------------------------------------------------------------------------
// Pretrained embeddings

pub const GLOVE_DIM: usize = 300;
/// Bound of the uniform draw for words missing from the embedding file.
pub const OOV_BOUND: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    pub matrix: Tensor<f64>,
    pub trainable: bool,
    /// Vocabulary words (excluding `<pad>` and `<unk>`) found in the file.
    pub hits: usize,
}

impl EmbeddingMatrix {
    pub fn coverage(&self) -> f64 {
        let words = self.matrix.rows().saturating_sub(2);
        if words == 0 {
            return 0.0;
        }
        self.hits as f64 / words as f64
    }
}

/// Reads `word v1 .. v_dim` lines, keeping rows for vocabulary words only.
///
/// Fields are taken from the right, so words containing spaces survive.
/// Missing words get `U(-0.25, 0.25)` rows and `<pad>` stays zero.
pub fn load_glove_subset<R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    rng: &mut R,
) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(|e| DolfinError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    let mut buf = Vec::new();
    let mut lineno = 0;
    loop {
        buf.clear();
        let read = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| DolfinError::io(path, e))?;
        if read == 0 {
            break;
        }
        lineno += 1;
        let line = decode_bytes(std::mem::take(&mut buf));
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() < dim + 1 {
            return Err(parse_error(
                path,
                lineno,
                format!(
                    "vector for '{}' has {} values, expected {dim}",
                    fields[0],
                    fields.len() - 1
                ),
            ));
        }
        let split = fields.len() - dim;
        let word = fields[..split].join(" ");
        if split > 1 && fields[..split].iter().skip(1).all(|f| f.parse::<f64>().is_ok()) {
            return Err(parse_error(
                path,
                lineno,
                format!(
                    "vector for '{}' has {} values, expected {dim}",
                    fields[0],
                    fields.len() - 1
                ),
            ));
        }
        let Some(idx) = vocab.get(&word) else { continue };
        if idx == PAD_INDEX || rows[idx].is_some() {
            continue;
        }
        let values = fields[split..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_error(path, lineno, format!("vector for '{word}': {e}")))?;
        rows[idx] = Some(values);
    }

    let mut matrix = Tensor::zeros(&[vocab.len(), dim]);
    let mut hits = 0;
    for (i, row) in rows.into_iter().enumerate() {
        if i == PAD_INDEX {
            continue;
        }
        let dst = matrix.row_mut(i);
        match row {
            Some(v) => {
                if i != UNK_INDEX {
                    hits += 1;
                }
                dst.copy_from_slice(&v);
            }
            None => dst.iter_mut().for_each(|x| *x = rng.gen_range(-OOV_BOUND..=OOV_BOUND)),
        }
    }
    Ok(EmbeddingMatrix {
        matrix,
        trainable: true,
        hits,
    })
}
