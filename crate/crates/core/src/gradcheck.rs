//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Coordinates whose ±eps perturbation changes the activation pattern of
//! any relu, clamp or max-pool node are skipped: the function is not
//! differentiable along that path, so the finite difference is
//! meaningless there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{OpKind, Tape, Var};
use crate::bolf::{truncated_sum, BolfParams, LatentDistribution};
use crate::encoders::{bilstm_endpoints, conv1d_temporal, Encoder, EncoderConfig, FilterBank};
use crate::error::Result;
use crate::model::{Architecture, Classifier, ModelConfig};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckReport {
    pub fn merge(&mut self, other: CheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, x: &Tensor<f64>) -> Result<(f64, Vec<u32>)>
where
    F: Fn(&mut Tape<'static, f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.trace_kinks();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    Ok((tape.value(out).item(), tape.kink_pattern().unwrap_or(&[]).to_vec()))
}

/// Compares the gradient of scalar `f` at `x` with central differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<CheckReport>
where
    F: Fn(&mut Tape<'static, f64>, Var) -> Result<Var>,
{
    finite_diff_check_with_fault(f, x, eps, None)
}

pub fn finite_diff_check_with_fault<F>(f: F, x: &Tensor<f64>, eps: f64, fault: Option<OpKind>) -> Result<CheckReport>
where
    F: Fn(&mut Tape<'static, f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.trace_kinks();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let base_pattern = tape.kink_pattern().unwrap_or(&[]).to_vec();
    tape.backward_leaves(out)?;
    let analytic = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = CheckReport::default();
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let (plus, p_plus) = evaluate(&f, &probe)?;
        probe.data_mut()[k] = orig - eps;
        let (minus, p_minus) = evaluate(&f, &probe)?;
        probe.data_mut()[k] = orig;
        if p_plus != base_pattern || p_minus != base_pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic.data()[k], numeric));
        report.checked += 1;
    }
    Ok(report)
}

fn evaluate_params<F>(f: &F, store: &ParamStore<f64>) -> Result<(f64, Vec<u32>)>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    tape.trace_kinks();
    let out = f(&mut tape)?;
    Ok((tape.value(out).item(), tape.kink_pattern().unwrap_or(&[]).to_vec()))
}

/// Checks the gradient of `f` with respect to every parameter in `store`.
pub fn param_check<F>(store: &ParamStore<f64>, f: F, eps: f64, fault: Option<OpKind>) -> Result<CheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let mut grads = Gradients::zeros_like(store);
    let base_pattern = {
        let mut tape = Tape::with_params(store);
        tape.trace_kinks();
        if let Some(kind) = fault {
            tape.inject_fault(kind);
        }
        let out = f(&mut tape)?;
        let pattern = tape.kink_pattern().unwrap_or(&[]).to_vec();
        tape.backward(out, &mut grads)?;
        pattern
    };

    let mut report = CheckReport::default();
    let mut work = store.clone();
    for id in store.ids() {
        for k in 0..store.get(id).len() {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let (plus, p_plus) = evaluate_params(&f, &work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let (minus, p_minus) = evaluate_params(&f, &work)?;
            work.get_mut(id).data_mut()[k] = orig;
            if p_plus != base_pattern || p_minus != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            report.max_rel_err = report.max_rel_err.max(rel_err(grads.get(id).data()[k], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Suite

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub name: String,
    #[serde(flatten)]
    pub report: CheckReport,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub seeds: Vec<u64>,
    pub eps: f64,
    pub tolerance: f64,
    pub checks: Vec<OpCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Names reported by [`run_suite`], in order.
pub const SUITE_OPS: &[&str] = &[
    "matmul",
    "add",
    "add_row",
    "scale",
    "sum_rows",
    "concat",
    "stack_rows",
    "row",
    "slice_cols",
    "embedding_lookup",
    "dropout",
    "softmax_rows",
    "relu",
    "clamp_max_one",
    "maxpool_over_time",
    "cross_entropy",
    "lstm_cell",
    "conv1d_temporal",
    "encode_conv",
    "encode_bilstm",
    "bilstm_endpoints",
    "latent_distributions",
    "truncated_sum",
    "compose_text_vector",
    "cnn",
    "bilstm",
    "dolfin-conv",
    "dolfin-bilstm",
];

/// Maps a suite op name to the tape operation whose backward it
/// exercises most directly.
pub fn op_kind_for(name: &str) -> Option<OpKind> {
    Some(match name {
        "matmul" => OpKind::MatMul,
        "add" => OpKind::Add,
        "add_row" => OpKind::AddRow,
        "scale" => OpKind::Scale,
        "sum_rows" => OpKind::SumRows,
        "concat" => OpKind::Concat,
        "stack_rows" => OpKind::StackRows,
        "row" => OpKind::Row,
        "slice_cols" => OpKind::Slice,
        "embedding_lookup" => OpKind::Embedding,
        "dropout" => OpKind::Dropout,
        "softmax_rows" => OpKind::SoftmaxRows,
        "relu" => OpKind::Relu,
        "clamp_max_one" => OpKind::ClampMaxOne,
        "maxpool_over_time" => OpKind::MaxPool,
        "cross_entropy" => OpKind::CrossEntropy,
        "lstm_cell" => OpKind::LstmCell,
        "conv1d_temporal" => OpKind::Unfold,
        _ => return None,
    })
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `Σ y ⊙ w` for a fixed random `w`, so that no output is weighted
/// equally (a plain sum of softmax rows has zero gradient).
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let (_, k) = tape.value(y).dims2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = tape.constant(random(&[k, 1], -1.0, 1.0, &mut rng));
    let col = tape.matmul(y, w)?;
    Ok(tape.sum_all(col))
}

fn small_model_config(arch: Architecture) -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        filter_sizes: vec![2, 3],
        filters_per_size: 3,
        lstm_hidden: 3,
        latent_features: 4,
        text_dim: 3,
        dropout: 0.5,
        ..ModelConfig::new(arch, 7, 3)
    }
}

fn check_op(name: &str, seed: u64, eps: f64, fault: Option<OpKind>) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaf = |f: &dyn Fn(&mut Tape<'static, f64>, Var) -> Result<Var>, x: &Tensor<f64>| {
        finite_diff_check_with_fault(f, x, eps, fault)
    };
    let mut report = CheckReport::default();
    match name {
        "matmul" => {
            let a = random(&[4, 3], -1.0, 1.0, &mut rng);
            let b = random(&[3, 2], -1.0, 1.0, &mut rng);
            let (a2, b2) = (a.clone(), b.clone());
            report.merge(leaf(
                &move |t, x| {
                    let bv = t.constant(b2.clone());
                    let y = t.matmul(x, bv)?;
                    project(t, y, seed)
                },
                &a,
            )?);
            report.merge(leaf(
                &move |t, x| {
                    let av = t.constant(a2.clone());
                    let y = t.matmul(av, x)?;
                    project(t, y, seed)
                },
                &b,
            )?);
        }
        "add" => {
            let other = random(&[3, 4], -1.0, 1.0, &mut rng);
            let x = random(&[3, 4], -1.0, 1.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let o = t.constant(other.clone());
                    let y = t.add(x, o)?;
                    let y = t.add(y, x)?;
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "add_row" => {
            let a = random(&[3, 4], -1.0, 1.0, &mut rng);
            let bias = random(&[1, 4], -1.0, 1.0, &mut rng);
            let a2 = a.clone();
            report.merge(leaf(
                &move |t, x| {
                    let av = t.constant(a2.clone());
                    let y = t.add_row(av, x)?;
                    project(t, y, seed)
                },
                &bias,
            )?);
            report.merge(leaf(
                &move |t, x| {
                    let b = t.constant(bias.clone());
                    let y = t.add_row(x, b)?;
                    project(t, y, seed)
                },
                &a,
            )?);
        }
        "scale" => {
            let x = random(&[2, 5], -1.0, 1.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let y = t.scale(x, -1.7);
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "sum_rows" => {
            let x = random(&[5, 3], -1.0, 1.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let y = t.sum_rows(x)?;
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "concat" => {
            let other = random(&[3, 2], -1.0, 1.0, &mut rng);
            let x = random(&[3, 4], -1.0, 1.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let o = t.constant(other.clone());
                    let y = t.concat(&[o, x, x])?;
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "stack_rows" => {
            let x = random(&[1, 4], -1.0, 1.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let s = t.scale(x, 2.0);
                    let y = t.stack_rows(&[x, s, x])?;
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "row" => {
            let x = random(&[4, 3], -1.0, 1.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let r1 = t.row(x, 1)?;
                    let r3 = t.row(x, 3)?;
                    let y = t.concat(&[r1, r3])?;
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "slice_cols" => {
            let x = random(&[3, 6], -1.0, 1.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let y = t.slice_cols(x, 2, 3)?;
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "embedding_lookup" => {
            let mut store = ParamStore::new();
            let table = store.add("emb", random(&[5, 3], -1.0, 1.0, &mut rng));
            report.merge(param_check(
                &store,
                |t| {
                    let y = t.embedding(table, &[1, 3, 1, 4])?;
                    project(t, y, seed)
                },
                eps,
                fault,
            )?);
        }
        "dropout" => {
            let x = random(&[3, 5], -1.0, 1.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
                    let y = t.dropout(x, 0.5, Some(&mut mask_rng));
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "softmax_rows" => {
            let x = random(&[3, 5], -2.0, 2.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let y = t.softmax_rows(x)?;
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "relu" => {
            let x = random(&[2, 6], -1.0, 1.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let y = t.relu(x);
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "clamp_max_one" => {
            let x = random(&[2, 6], 0.0, 2.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let y = t.clamp_max_one(x);
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "maxpool_over_time" => {
            let x = random(&[5, 4], -1.0, 1.0, &mut rng);
            report.merge(leaf(
                &move |t, x| {
                    let y = t.maxpool_over_time(x)?;
                    project(t, y, seed)
                },
                &x,
            )?);
        }
        "cross_entropy" => {
            let x = random(&[1, 5], -2.0, 2.0, &mut rng);
            let gold = (seed % 5) as usize;
            report.merge(leaf(&move |t, x| t.cross_entropy(x, gold), &x)?);
        }
        "lstm_cell" => {
            let h = 3;
            let pre = random(&[1, 4 * h], -1.5, 1.5, &mut rng);
            let c = random(&[1, h], -1.0, 1.0, &mut rng);
            let (pre2, c2) = (pre.clone(), c.clone());
            report.merge(leaf(
                &move |t, x| {
                    let cv = t.constant(c2.clone());
                    let y = t.lstm_cell(x, cv)?;
                    project(t, y, seed)
                },
                &pre,
            )?);
            report.merge(leaf(
                &move |t, x| {
                    let p = t.constant(pre2.clone());
                    let y = t.lstm_cell(p, x)?;
                    project(t, y, seed)
                },
                &c,
            )?);
        }
        "conv1d_temporal" => {
            let mut store = ParamStore::new();
            let input = store.add("x", random(&[6, 4], -1.0, 1.0, &mut rng));
            let bank = FilterBank::init(&mut store, "conv", 4, &[3], 2, &mut rng);
            let wide = FilterBank::init(&mut store, "wide", 4, &[2, 4], 2, &mut rng);
            report.merge(param_check(
                &store,
                |t| {
                    let x = t.param(input);
                    let a = conv1d_temporal(t, x, &bank, true)?;
                    let b = conv1d_temporal(t, x, &wide, true)?;
                    let v = conv1d_temporal(t, x, &bank, false)?;
                    let pa = project(t, a, seed)?;
                    let pb = project(t, b, seed + 1)?;
                    let pv = project(t, v, seed + 2)?;
                    let s = t.add(pa, pb)?;
                    t.add(s, pv)
                },
                eps,
                fault,
            )?);
        }
        "encode_conv" | "encode_bilstm" => {
            let cfg = if name == "encode_conv" {
                EncoderConfig {
                    filter_sizes: vec![2, 3],
                    filters_per_size: 2,
                    ..EncoderConfig::conv()
                }
            } else {
                EncoderConfig {
                    lstm_hidden: 2,
                    ..EncoderConfig::bilstm()
                }
            };
            let mut store = ParamStore::new();
            let input = store.add("x", random(&[5, 3], -1.0, 1.0, &mut rng));
            let enc = Encoder::init(&cfg, 3, &mut store, &mut rng)?;
            report.merge(param_check(
                &store,
                |t| {
                    let x = t.param(input);
                    let seq = enc.encode(t, x)?;
                    project(t, seq.vectors, seed)
                },
                eps,
                fault,
            )?);
        }
        "bilstm_endpoints" => {
            let cfg = EncoderConfig {
                lstm_hidden: 2,
                ..EncoderConfig::bilstm()
            };
            let mut store = ParamStore::new();
            let input = store.add("x", random(&[4, 3], -1.0, 1.0, &mut rng));
            let enc = Encoder::init(&cfg, 3, &mut store, &mut rng)?;
            report.merge(param_check(
                &store,
                |t| {
                    let x = t.param(input);
                    let seq = enc.encode(t, x)?;
                    let e = bilstm_endpoints(t, &seq)?;
                    project(t, e, seed)
                },
                eps,
                fault,
            )?);
        }
        "latent_distributions" | "truncated_sum" | "compose_text_vector" => {
            let mut store = ParamStore::new();
            let input = store.add("w", random(&[3, 4], -1.0, 1.0, &mut rng));
            let head = BolfParams::init(&mut store, 4, 5, 3, &mut rng)?;
            let stage = name.to_string();
            report.merge(param_check(
                &store,
                |t| {
                    let vectors = t.param(input);
                    let seq = crate::encoders::EncodedSequence {
                        vectors,
                        len: 3,
                        width: 4,
                        kind: crate::encoders::EncoderKind::Conv,
                    };
                    let dist: LatentDistribution = head.latent_distributions(t, &seq)?;
                    if stage == "latent_distributions" {
                        return project(t, dist.u, seed);
                    }
                    let bag = truncated_sum(t, &dist)?;
                    if stage == "truncated_sum" {
                        return project(t, bag.r, seed);
                    }
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
                    let s = head.compose_text_vector(t, &bag, 0.5, Some(&mut drop_rng))?;
                    project(t, s, seed)
                },
                eps,
                fault,
            )?);
        }
        "cnn" | "bilstm" | "dolfin-conv" | "dolfin-bilstm" => {
            let arch: Architecture = name.parse()?;
            let mut model = Classifier::<f64>::new(small_model_config(arch), None, seed)?;
            // Default initialisations are small enough that some recurrent
            // gradients sink to ~1e-8, below finite-difference resolution.
            for id in model.params().ids().collect::<Vec<_>>() {
                for v in model.params_mut().get_mut(id).data_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
            let tokens: Vec<usize> = (0..4).map(|_| rng.gen_range(1..7)).collect();
            let gold = rng.gen_range(0..3);
            report.merge(param_check(
                model.params(),
                |t| {
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
                    model.loss(t, &tokens, gold, Some(&mut drop_rng))
                },
                eps,
                fault,
            )?);
        }
        other => {
            return Err(crate::error::DolfinError::InvalidArgument(format!(
                "no gradient check named '{other}'"
            )))
        }
    }
    Ok(report)
}

/// Runs every check in [`SUITE_OPS`] for every seed. `fault` corrupts the
/// backward pass of one tape operation (negative control).
pub fn run_suite(seeds: &[u64], fault: Option<OpKind>) -> Result<SuiteReport> {
    run_checks(SUITE_OPS, seeds, fault)
}

/// Runs the named checks, in the given order, for every seed.
pub fn run_checks<S: AsRef<str>>(names: &[S], seeds: &[u64], fault: Option<OpKind>) -> Result<SuiteReport> {
    let eps = DEFAULT_EPS;
    let tolerance = DEFAULT_TOLERANCE;
    let mut checks = Vec::with_capacity(names.len());
    for name in names {
        let name = name.as_ref();
        let mut report = CheckReport::default();
        for &seed in seeds {
            report.merge(check_op(name, seed, eps, fault)?);
        }
        checks.push(OpCheck {
            name: name.to_string(),
            passed: report.max_rel_err < tolerance && report.checked > 0,
            report,
        });
    }
    Ok(SuiteReport {
        seeds: seeds.to_vec(),
        eps,
        tolerance,
        checks,
    })
}

/// Runs a single named check over `seeds`.
pub fn run_one(name: &str, seeds: &[u64], fault: Option<OpKind>) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    for &seed in seeds {
        report.merge(check_op(name, seed, DEFAULT_EPS, fault)?);
    }
    Ok(report)
}
