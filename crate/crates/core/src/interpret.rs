//! Category support of latent features and words, and their renderings.
//!
//! `q(c|f_j)` is estimated by counting, over an unlabeled corpus, how often
//! feature `j` is on (`r_j > delta`) in texts the model assigns to `c`.
//! A word's support is the mixture
//! `q(c|w_i, s) = Σ_j q(c|f_j) p(f_j|w_i, s)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DolfinError, Result};
use crate::model::{argmax, Classifier};
use crate::tensor::Scalar;

pub const DEFAULT_DELTA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSupportTable {
    pub labels: Vec<String>,
    pub delta: f64,
    /// `counts[c][j]`: texts predicted `c` in which feature `j` fired.
    pub counts: Vec<Vec<u64>>,
    /// `q[c][j] = q(c | f_j)`, columns normalised.
    pub q: Vec<Vec<f64>>,
    /// Features that never fired; their column is uniform.
    pub unused: Vec<bool>,
}

impl FeatureSupportTable {
    /// Column-normalises `counts`; zero columns become uniform and are
    /// flagged unused.
    pub fn from_counts(labels: Vec<String>, delta: f64, counts: Vec<Vec<u64>>) -> Result<Self> {
        let m = counts.len();
        if m == 0 || labels.len() != m {
            return Err(DolfinError::Shape(format!(
                "{} count rows for {} labels",
                m,
                labels.len()
            )));
        }
        let d = counts[0].len();
        if counts.iter().any(|row| row.len() != d) {
            return Err(DolfinError::Shape("ragged count matrix".into()));
        }
        let mut q = vec![vec![0.0; d]; m];
        let mut unused = vec![false; d];
        for j in 0..d {
            let total: u64 = counts.iter().map(|row| row[j]).sum();
            if total == 0 {
                unused[j] = true;
                for row in q.iter_mut() {
                    row[j] = 1.0 / m as f64;
                }
            } else {
                for c in 0..m {
                    q[c][j] = counts[c][j] as f64 / total as f64;
                }
            }
        }
        Ok(Self {
            labels,
            delta,
            counts,
            q,
            unused,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.q.len()
    }

    pub fn num_features(&self) -> usize {
        self.q.first().map_or(0, Vec::len)
    }

    /// `q(· | f_j)`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.q.iter().map(|row| row[j]).collect()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(DolfinError::InvalidArgument(format!("delta {delta} outside [0, 1]")));
    }
    Ok(())
}

/// Counts from `(predicted category, r)` observations.
pub fn count_firings(
    observations: &[(usize, Vec<f64>)],
    num_classes: usize,
    num_features: usize,
    delta: f64,
) -> Result<Vec<Vec<u64>>> {
    check_delta(delta)?;
    let mut counts = vec![vec![0u64; num_features]; num_classes];
    for (c, r) in observations {
        if *c >= num_classes || r.len() != num_features {
            return Err(DolfinError::Shape(format!(
                "observation (category {c}, {} features) for a {num_classes} x {num_features} table",
                r.len()
            )));
        }
        for (j, &rj) in r.iter().enumerate() {
            if rj > delta {
                counts[*c][j] += 1;
            }
        }
    }
    Ok(counts)
}

/// Runs the model over `corpus` and tallies feature firings by predicted
/// category. Gold labels are not used.
pub fn estimate_feature_support<T: Scalar>(
    model: &Classifier<T>,
    corpus: &[Vec<usize>],
    delta: f64,
    labels: &[String],
) -> Result<FeatureSupportTable> {
    check_delta(delta)?;
    if corpus.is_empty() {
        return Err(DolfinError::Empty("support estimation needs at least one text".into()));
    }
    let d = latent_width(model)?;
    let m = model.config().num_classes;
    if labels.len() != m {
        return Err(DolfinError::Shape(format!(
            "{} labels for {m} categories",
            labels.len()
        )));
    }
    let observations = corpus
        .iter()
        .map(|tokens| {
            let p = model.predict(tokens)?;
            let r = p
                .bag
                .ok_or_else(|| DolfinError::InvalidArgument("model has no latent features".into()))?;
            Ok((p.label, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let counts = count_firings(&observations, m, d, delta)?;
    FeatureSupportTable::from_counts(labels.to_vec(), delta, counts)
}

fn latent_width<T: Scalar>(model: &Classifier<T>) -> Result<usize> {
    model.bolf_params().map(|b| b.latent_features).ok_or_else(|| {
        DolfinError::InvalidArgument(format!(
            "{} has no latent features to interpret",
            model.config().architecture
        ))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordSupport {
    pub tokens: Vec<String>,
    /// `latent[i][j] = p(f_j | w_i, s)`.
    pub latent: Vec<Vec<f64>>,
    /// `support[i][c] = q(c | w_i, s)`.
    pub support: Vec<Vec<f64>>,
    /// `argmax_j p(f_j | w_i, s)`.
    pub argmax_feature: Vec<usize>,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

/// Mixes the rows of `latent` with the table columns.
pub fn mix_support(table: &FeatureSupportTable, latent: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = table.num_features();
    let m = table.num_classes();
    latent
        .iter()
        .map(|p| {
            if p.len() != d {
                return Err(DolfinError::Shape(format!(
                    "latent row of width {} for a table with {d} features",
                    p.len()
                )));
            }
            let mut out = vec![0.0; m];
            for (j, &pj) in p.iter().enumerate() {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += table.q[c][j] * pj;
                }
            }
            Ok(out)
        })
        .collect()
}

pub fn word_support<T: Scalar>(
    model: &Classifier<T>,
    table: &FeatureSupportTable,
    tokens: &[String],
    indices: &[usize],
) -> Result<WordSupport> {
    let d = latent_width(model)?;
    if table.num_features() != d || table.num_classes() != model.config().num_classes {
        return Err(DolfinError::Shape(format!(
            "table is {} x {} but the model has {} categories and {d} features",
            table.num_classes(),
            table.num_features(),
            model.config().num_classes
        )));
    }
    if tokens.len() != indices.len() {
        return Err(DolfinError::Shape(format!(
            "{} tokens but {} indices",
            tokens.len(),
            indices.len()
        )));
    }
    let pred = model.predict(indices)?;
    let latent = pred.latent.unwrap_or_default();
    let support = mix_support(table, &latent)?;
    Ok(WordSupport {
        tokens: tokens.to_vec(),
        argmax_feature: latent.iter().map(|row| argmax(row)).collect(),
        latent,
        support,
        predicted: pred.label,
        probs: pred.probs,
    })
}

// ---------------------------------------------------------------------------
// Rendering

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Ansi,
    Html,
}

impl std::str::FromStr for Format {
    type Err = DolfinError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(Format::Ansi),
            "html" => Ok(Format::Html),
            other => Err(DolfinError::InvalidArgument(format!("unknown format '{other}'"))),
        }
    }
}

/// Which category rows to highlight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Highlight {
    Category(usize),
    All,
}

const ANSI_RESET: &str = "\x1b[0m";

/// Green and blue channel of a red highlight of intensity `v`.
fn fade(v: f64) -> u8 {
    (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8
}

fn ansi_cell(text: &str, v: f64) -> String {
    if v <= 0.0 {
        return text.to_string();
    }
    let gb = fade(v);
    format!("\x1b[30;48;2;255;{gb};{gb}m{text}{ANSI_RESET}")
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn html_bg(v: f64) -> String {
    format!("background-color:rgba(255,0,0,{:.3})", v.clamp(0.0, 1.0))
}

fn highlight_row(ws: &WordSupport, c: usize, format: Format) -> String {
    let cells = ws.tokens.iter().zip(&ws.support).map(|(tok, s)| match format {
        Format::Ansi => ansi_cell(tok, s[c]),
        Format::Html => format!(
            "<span class=\"w\" style=\"{}\" title=\"{:.4}\">{}</span>",
            html_bg(s[c]),
            s[c],
            escape_html(tok)
        ),
    });
    cells.collect::<Vec<_>>().join(" ")
}

/// Words shaded by `q(c | w, s)`. With [`Highlight::All`] there is one
/// row per category, each prefixed by its label.
pub fn render_highlight(ws: &WordSupport, which: Highlight, labels: &[String], format: Format) -> Result<String> {
    let m = ws.support.first().map_or(labels.len(), Vec::len);
    if labels.len() != m {
        return Err(DolfinError::Shape(format!(
            "{} labels for {m} categories",
            labels.len()
        )));
    }
    let rows: Vec<usize> = match which {
        Highlight::Category(c) if c < m => vec![c],
        Highlight::Category(c) => {
            return Err(DolfinError::InvalidArgument(format!(
                "category {c} out of range 0..{m}"
            )))
        }
        Highlight::All => (0..m).collect(),
    };
    let prefix = matches!(which, Highlight::All);
    let mut out = String::new();
    for c in rows {
        let body = highlight_row(ws, c, format);
        match format {
            Format::Ansi => {
                if prefix {
                    let _ = write!(out, "{} ", labels[c]);
                }
                let _ = writeln!(out, "{body}");
            }
            Format::Html => {
                let _ = write!(out, "<div class=\"row\">");
                if prefix {
                    let _ = write!(out, "<span class=\"label\">{}</span> ", escape_html(&labels[c]));
                }
                let _ = writeln!(out, "{body}</div>");
            }
        }
    }
    Ok(out)
}

fn percent(v: f64) -> i64 {
    (100.0 * v).round() as i64
}

/// Grid of `matrix` with cells shaded and annotated in percent.
pub fn render_heatmap(
    matrix: &[Vec<f64>],
    row_labels: &[String],
    col_labels: &[String],
    format: Format,
) -> Result<String> {
    if row_labels.len() != matrix.len() {
        return Err(DolfinError::Shape(format!(
            "{} row labels for {} rows",
            row_labels.len(),
            matrix.len()
        )));
    }
    for row in matrix {
        if row.len() != col_labels.len() {
            return Err(DolfinError::Shape(format!(
                "{} column labels for a row of {}",
                col_labels.len(),
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(DolfinError::InvalidArgument("heatmap values must lie in [0, 1]".into()));
        }
    }
    let mut out = String::new();
    match format {
        Format::Ansi => {
            let lw = row_labels.iter().map(|l| l.chars().count()).max().unwrap_or(0);
            let cw = col_labels.iter().map(|l| l.chars().count()).max().unwrap_or(0).max(3);
            let _ = write!(out, "{:lw$}", "");
            for l in col_labels {
                let _ = write!(out, " {l:>cw$}");
            }
            out.push('\n');
            for (label, row) in row_labels.iter().zip(matrix) {
                let _ = write!(out, "{label:lw$}");
                for &v in row {
                    let _ = write!(out, " {}", ansi_cell(&format!("{:>cw$}", percent(v)), v));
                }
                out.push('\n');
            }
        }
        Format::Html => {
            out.push_str("<table class=\"heatmap\">\n<tr><th></th>");
            for l in col_labels {
                let _ = write!(out, "<th>{}</th>", escape_html(l));
            }
            out.push_str("</tr>\n");
            for (label, row) in row_labels.iter().zip(matrix) {
                let _ = write!(out, "<tr><th>{}</th>", escape_html(label));
                for &v in row {
                    let _ = write!(out, "<td style=\"{}\">{}</td>", html_bg(v), percent(v));
                }
                out.push_str("</tr>\n");
            }
            out.push_str("</table>\n");
        }
    }
    Ok(out)
}

const SUBSCRIPTS: [char; 10] = ['₀', '₁', '₂', '₃', '₄', '₅', '₆', '₇', '₈', '₉'];

fn subscript(n: usize) -> String {
    n.to_string().bytes().map(|b| SUBSCRIPTS[(b - b'0') as usize]).collect()
}

pub fn feature_labels(table: &FeatureSupportTable) -> Vec<String> {
    (0..table.num_features())
        .map(|j| {
            if table.unused[j] {
                format!("f{j}*")
            } else {
                format!("f{j}")
            }
        })
        .collect()
}

const HTML_STYLE: &str = "body{font-family:sans-serif;margin:2em}\
.row{margin:0.3em 0}.label{font-weight:bold;display:inline-block;min-width:6em}\
.w{padding:0 0.15em}table.heatmap{border-collapse:collapse;margin:1em 0}\
.heatmap td,.heatmap th{border:1px solid #ccc;padding:0.2em 0.4em;text-align:right;font-size:0.85em}";

/// Full report for one text: per-category highlights, the `q(c|f)`
/// heatmap (categories by features), the `p(f|w,s)` heatmap (words by
/// features) and each word tagged with its most probable feature.
pub fn render_report(ws: &WordSupport, table: &FeatureSupportTable, format: Format) -> Result<String> {
    let labels = &table.labels;
    let features = feature_labels(table);
    let highlight = render_highlight(ws, Highlight::All, labels, format)?;
    let q_map = render_heatmap(&table.q, labels, &features, format)?;
    let p_map = render_heatmap(&ws.latent, &ws.tokens, &features, format)?;
    let predicted = labels.get(ws.predicted).map_or("?", String::as_str);
    let mut out = String::new();
    match format {
        Format::Ansi => {
            let tagged: Vec<String> = ws
                .tokens
                .iter()
                .zip(&ws.argmax_feature)
                .map(|(t, &j)| format!("{t}{}", subscript(j)))
                .collect();
            let _ = writeln!(out, "predicted: {predicted} (p = {:.4})", ws.probs[ws.predicted]);
            let _ = writeln!(out, "\nq(c|w,s)\n{highlight}");
            let _ = writeln!(out, "q(c|f), delta = {}\n{q_map}", table.delta);
            let _ = writeln!(out, "p(f|w,s)\n{p_map}");
            let _ = writeln!(out, "features: {}", tagged.join(" "));
            if table.unused.iter().any(|&u| u) {
                let _ = writeln!(out, "* feature never fired; support set to uniform");
            }
        }
        Format::Html => {
            let tagged: Vec<String> = ws
                .tokens
                .iter()
                .zip(&ws.argmax_feature)
                .map(|(t, &j)| format!("{}<sub>{j}</sub>", escape_html(t)))
                .collect();
            let _ = write!(
                out,
                "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\"/>\n<title>support report</title>\n\
                 <style>{HTML_STYLE}</style>\n</head>\n<body>\n"
            );
            let _ = writeln!(
                out,
                "<p>predicted: <b>{}</b> (p = {:.4})</p>",
                escape_html(predicted),
                ws.probs[ws.predicted]
            );
            let _ = writeln!(out, "<h2>q(c|w,s)</h2>\n{highlight}");
            let _ = writeln!(out, "<h2>q(c|f), delta = {}</h2>\n{q_map}", table.delta);
            let _ = writeln!(out, "<h2>p(f|w,s)</h2>\n{p_map}");
            let _ = writeln!(out, "<p class=\"features\">{}</p>", tagged.join(" "));
            if table.unused.iter().any(|&u| u) {
                let _ = writeln!(out, "<p>* feature never fired; support set to uniform</p>");
            }
            out.push_str("</body>\n</html>\n");
        }
    }
    Ok(out)
}

/// Removes ANSI escape sequences.
pub fn strip_ansi(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\x1b' {
            for d in chars.by_ref() {
                if d.is_ascii_alphabetic() {
                    break;
                }
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(m: usize) -> Vec<String> {
        (0..m).map(|c| format!("C{c}")).collect()
    }

    #[test]
    fn single_observation() {
        let counts = count_firings(&[(1, vec![0.9, 0.1])], 3, 2, 0.5).unwrap();
        let t = FeatureSupportTable::from_counts(labels(3), 0.5, counts).unwrap();
        assert_eq!(t.counts, vec![vec![0, 0], vec![1, 0], vec![0, 0]]);
        assert_eq!(t.column(0), [0.0, 1.0, 0.0]);
        assert_eq!(t.unused, [false, true]);
        assert_eq!(t.column(1), [1.0 / 3.0; 3]);
    }

    #[test]
    fn symmetric_firing_splits_evenly() {
        let counts = count_firings(&[(0, vec![1.0]), (1, vec![0.8])], 2, 1, 0.5).unwrap();
        let t = FeatureSupportTable::from_counts(labels(2), 0.5, counts).unwrap();
        assert_eq!(t.column(0), [0.5, 0.5]);
    }

    #[test]
    fn bad_delta_and_shapes() {
        assert!(count_firings(&[], 2, 2, 1.5).is_err());
        assert!(count_firings(&[(2, vec![0.0, 0.0])], 2, 2, 0.5).is_err());
        assert!(FeatureSupportTable::from_counts(labels(1), 0.5, vec![vec![0], vec![1]]).is_err());
    }

    fn random_table(m: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureSupportTable {
        let counts = (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(0..5u64)).collect())
            .collect();
        FeatureSupportTable::from_counts(labels(m), 0.5, counts).unwrap()
    }

    fn random_dist(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn mixture_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_table(3, 4, &mut rng);
        let one_hot = vec![vec![0.0, 0.0, 1.0, 0.0]];
        assert_eq!(mix_support(&t, &one_hot).unwrap()[0], t.column(2));

        let uniform = FeatureSupportTable::from_counts(labels(3), 0.5, vec![vec![0; 4]; 3]).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|_| random_dist(4, &mut rng)).collect();
        for s in mix_support(&uniform, &rows).unwrap() {
            for v in s {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert!(mix_support(&t, &[vec![1.0]]).is_err());
    }

    #[test]
    fn mixture_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let d = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=6);
            let t = random_table(m, d, &mut rng);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| random_dist(d, &mut rng)).collect();
            let got = mix_support(&t, &rows).unwrap();
            for i in 0..n {
                for c in 0..m {
                    let mut want = 0.0;
                    for j in 0..d {
                        want += t.q[c][j] * rows[i][j];
                    }
                    assert!((got[i][c] - want).abs() <= 1e-12);
                }
            }
        }
    }

    fn strategy_obs() -> impl Strategy<Value = Vec<(usize, Vec<f64>)>> {
        prop::collection::vec((0usize..3, prop::collection::vec(0.0f64..=1.0, 4)), 0..30)
    }

    proptest! {
        #[test]
        fn counts_ignore_corpus_order(obs in strategy_obs(), seed in any::<u64>()) {
            let mut shuffled = obs.clone();
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                count_firings(&obs, 3, 4, 0.5).unwrap(),
                count_firings(&shuffled, 3, 4, 0.5).unwrap()
            );
        }

        #[test]
        fn raising_delta_never_adds_counts(obs in strategy_obs(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c_lo = count_firings(&obs, 3, 4, lo).unwrap();
            let c_hi = count_firings(&obs, 3, 4, hi).unwrap();
            for (r_lo, r_hi) in c_lo.iter().zip(&c_hi) {
                for (x, y) in r_lo.iter().zip(r_hi) {
                    prop_assert!(y <= x);
                }
            }
        }

        #[test]
        fn columns_normalised_or_uniform(obs in strategy_obs(), delta in 0.0f64..=1.0) {
            let t = FeatureSupportTable::from_counts(labels(3), delta, count_firings(&obs, 3, 4, delta).unwrap()).unwrap();
            for j in 0..4 {
                let col = t.column(j);
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if t.unused[j] {
                    prop_assert!(col.iter().all(|&v| v == 1.0 / 3.0));
                }
            }
        }

        #[test]
        fn word_support_is_a_distribution(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_table(4, 5, &mut rng);
            let rows: Vec<Vec<f64>> = (0..6).map(|_| random_dist(5, &mut rng)).collect();
            for s in mix_support(&t, &rows).unwrap() {
                prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn uniform_feature_does_not_move_preference(seed in any::<u64>(), j in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = random_table(3, 4, &mut rng);
            for row in t.q.iter_mut() {
                row[j] = 1.0 / 3.0;
            }
            let p = random_dist(4, &mut rng);
            let rest = 1.0 - p[j];
            let moved: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(k, &v)| if k == j { 0.0 } else { v / rest })
                .collect();
            let before = mix_support(&t, &[p]).unwrap().remove(0);
            let after = mix_support(&t, &[moved]).unwrap().remove(0);
            let mut sorted = before.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(argmax(&before), argmax(&after));
        }
    }

    fn sample_ws(m: usize) -> WordSupport {
        WordSupport {
            tokens: vec!["Who".into(), "<b>".into(), "?".into()],
            latent: vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]],
            support: vec![vec![0.0; m], vec![1.0 / m as f64; m], {
                let mut v = vec![0.0; m];
                v[0] = 1.0;
                v
            }],
            argmax_feature: vec![0, 0, 1],
            predicted: 0,
            probs: vec![1.0 / m as f64; m],
        }
    }

    #[test]
    fn ansi_highlight_strips_to_tokens() {
        let ws = sample_ws(2);
        let one = render_highlight(&ws, Highlight::Category(0), &labels(2), Format::Ansi).unwrap();
        assert_eq!(strip_ansi(&one).trim_end(), "Who <b> ?");
        // q = 0 gets no escape; q = 1 gets full red.
        assert!(one.starts_with("Who "));
        assert!(one.contains("\x1b[30;48;2;255;0;0m?"));
        let all = render_highlight(&ws, Highlight::All, &labels(2), Format::Ansi).unwrap();
        let lines: Vec<String> = strip_ansi(&all).lines().map(String::from).collect();
        assert_eq!(lines, ["C0 Who <b> ?", "C1 Who <b> ?"]);
        assert!(render_highlight(&ws, Highlight::Category(2), &labels(2), Format::Ansi).is_err());
    }

    /// Tag balance over a restricted XHTML subset.
    fn well_formed(doc: &str) -> bool {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = doc;
        while let Some(start) = rest.find('<') {
            let Some(len) = rest[start..].find('>') else {
                return false;
            };
            let tag = &rest[start + 1..start + len];
            rest = &rest[start + len + 1..];
            if tag.starts_with('!') || tag.ends_with('/') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                if stack.pop().as_deref() != Some(name) {
                    return false;
                }
            } else {
                stack.push(tag.split_whitespace().next().unwrap_or("").to_string());
            }
        }
        stack.is_empty() && !rest.contains('>')
    }

    #[test]
    fn html_highlight_is_well_formed() {
        let ws = sample_ws(3);
        let html = render_highlight(&ws, Highlight::All, &labels(3), Format::Html).unwrap();
        assert!(well_formed(&html));
        assert_eq!(html.matches("<span class=\"w\"").count(), 3 * 3);
        assert!(html.contains("&lt;b&gt;"));
        assert!(html.contains("rgba(255,0,0,0.000)"));
        assert!(html.contains("rgba(255,0,0,1.000)"));
    }

    #[test]
    fn heatmap_cases() {
        let one = render_heatmap(&[vec![1.0]], &["r".into()], &["c".into()], Format::Html).unwrap();
        assert!(one.contains("<td style=\"background-color:rgba(255,0,0,1.000)\">100</td>"));
        assert!(well_formed(&one));
        let ansi = render_heatmap(&[vec![1.0]], &["r".into()], &["c".into()], Format::Ansi).unwrap();
        assert!(ansi.contains("\x1b[30;48;2;255;0;0m100"));
        assert!(render_heatmap(&[vec![0.5]], &[], &["c".into()], Format::Ansi).is_err());
        assert!(render_heatmap(&[vec![0.5]], &["r".into()], &[], Format::Ansi).is_err());
        assert!(render_heatmap(&[vec![1.5]], &["r".into()], &["c".into()], Format::Ansi).is_err());
    }

    #[test]
    fn heatmap_reads_back_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_table(3, 5, &mut rng);
        let text = render_heatmap(&t.q, &t.labels, &feature_labels(&t), Format::Ansi).unwrap();
        let plain = strip_ansi(&text);
        for (c, line) in plain.lines().skip(1).enumerate() {
            let cells: Vec<i64> = line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
            let want: Vec<i64> = t.q[c].iter().map(|&v| percent(v)).collect();
            assert_eq!(cells, want);
        }
    }

    fn tiny_dolfin(seed: u64) -> Classifier<f64> {
        let cfg = ModelConfig {
            embed_dim: 5,
            filter_sizes: vec![2],
            filters_per_size: 3,
            latent_features: 4,
            text_dim: 3,
            ..ModelConfig::new(Architecture::DolfinConv, 9, 3)
        };
        Classifier::new(cfg, None, seed).unwrap()
    }

    #[test]
    fn estimator_matches_recount() {
        let model = tiny_dolfin(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corpus: Vec<Vec<usize>> = (0..40)
            .map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(2..9)).collect())
            .collect();
        let t = estimate_feature_support(&model, &corpus, 0.3, &labels(3)).unwrap();
        let mut recount = vec![vec![0u64; 4]; 3];
        for tokens in &corpus {
            let p = model.predict(tokens).unwrap();
            let bag = p.bag.unwrap();
            for j in 0..4 {
                if bag[j] > 0.3 {
                    recount[p.label][j] += 1;
                }
            }
        }
        assert_eq!(t.counts, recount);
        assert!(estimate_feature_support(&model, &[], 0.5, &labels(3)).is_err());
    }

    #[test]
    fn word_support_from_model() {
        let model = tiny_dolfin(6);
        let corpus = vec![vec![2, 3, 4], vec![5, 6], vec![7, 8, 2, 3]];
        let t = estimate_feature_support(&model, &corpus, 0.5, &labels(3)).unwrap();
        let tokens: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let ws = word_support(&model, &t, &tokens, &[2, 3, 4]).unwrap();
        assert_eq!(ws.support.len(), 3);
        for ((s, p), &k) in ws.support.iter().zip(&ws.latent).zip(&ws.argmax_feature) {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(k, argmax(p));
            assert_eq!(p.len(), 4);
        }
        let report = render_report(&ws, &t, Format::Html).unwrap();
        assert!(well_formed(&report));
        assert!(word_support(&model, &t, &tokens, &[2, 3]).is_err());

        let cnn = Classifier::<f64>::new(ModelConfig::new(Architecture::Cnn, 9, 3), None, 0).unwrap();
        assert!(estimate_feature_support(&cnn, &corpus, 0.5, &labels(3)).is_err());
    }

    #[test]
    fn subscripts() {
        assert_eq!(subscript(0), "₀");
        assert_eq!(subscript(19), "₁₉");
    }
}
