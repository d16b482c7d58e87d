//! Sequence encoders: map embedded tokens `[n × d_w]` to one context
//! vector per position.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DolfinError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Conv,
    Bilstm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub filter_sizes: Vec<usize>,
    pub filters_per_size: usize,
    pub lstm_hidden: usize,
}

impl EncoderConfig {
    pub fn conv() -> Self {
        Self {
            kind: EncoderKind::Conv,
            filter_sizes: vec![3, 4, 5],
            filters_per_size: 100,
            lstm_hidden: 100,
        }
    }

    pub fn bilstm() -> Self {
        Self {
            kind: EncoderKind::Bilstm,
            ..Self::conv()
        }
    }

    /// Width of each per-position output vector.
    pub fn output_width(&self) -> usize {
        match self.kind {
            EncoderKind::Conv => self.filter_sizes.len() * self.filters_per_size,
            EncoderKind::Bilstm => 2 * self.lstm_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = match self.kind {
            EncoderKind::Conv => {
                self.filter_sizes.is_empty() || self.filter_sizes.contains(&0) || self.filters_per_size == 0
            }
            EncoderKind::Bilstm => self.lstm_hidden == 0,
        };
        if bad {
            return Err(DolfinError::InvalidArgument(format!(
                "encoder sizes must be positive: {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Per-position context vectors.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSequence {
    pub vectors: Var,
    pub len: usize,
    pub width: usize,
    pub kind: EncoderKind,
}

#[derive(Clone, Debug)]
pub struct ConvFilter {
    pub window: usize,
    /// `[window · d_in × filters]`
    pub weight: ParamId,
    /// `[1 × filters]`
    pub bias: ParamId,
}

/// Filters of one or more window sizes, applied in parallel.
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub filters: Vec<ConvFilter>,
}

impl FilterBank {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input_dim: usize,
        sizes: &[usize],
        per_size: usize,
        rng: &mut R,
    ) -> Self {
        let filters = sizes
            .iter()
            .map(|&window| {
                let fan_in = window * input_dim;
                let bound = (1.0 / fan_in as f64).sqrt();
                let weight = store.add_uniform(format!("{prefix}.w{window}"), &[fan_in, per_size], bound, rng);
                let bias = store.add_uniform(format!("{prefix}.b{window}"), &[1, per_size], bound, rng);
                ConvFilter { window, weight, bias }
            })
            .collect();
        Self { filters }
    }
}

/// Temporal convolution of `x[n × d_in]` with every filter in `bank`,
/// channels concatenated per position.
///
/// With `pad`, each window size is zero-padded so the output keeps `n`
/// rows (odd windows centred, even windows one extra position on the
/// right). Without it, windows slide only over real positions, which
/// requires every filter to share one window size.
pub fn conv1d_temporal<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, bank: &FilterBank, pad: bool) -> Result<Var> {
    let (n, _) = tape.value(x).dims2()?;
    if n == 0 {
        return Err(DolfinError::Empty("convolution over an empty sequence".into()));
    }
    if !pad && bank.filters.windows(2).any(|w| w[0].window != w[1].window) {
        return Err(DolfinError::InvalidArgument(
            "unpadded convolution needs a single window size".into(),
        ));
    }
    let mut channels = Vec::with_capacity(bank.filters.len());
    for f in &bank.filters {
        let windows = if pad {
            tape.unfold(x, f.window, (f.window - 1) / 2)?
        } else {
            if n < f.window {
                return Err(DolfinError::InvalidArgument(format!(
                    "sequence of {} tokens is shorter than window {}",
                    n, f.window
                )));
            }
            let full = tape.unfold(x, f.window, 0)?;
            let rows: Vec<Var> = (0..=n - f.window).map(|i| tape.row(full, i)).collect::<Result<_>>()?;
            tape.stack_rows(&rows)?
        };
        let w = tape.param(f.weight);
        let b = tape.param(f.bias);
        channels.push(tape.linear(windows, w, b)?);
    }
    if channels.len() == 1 {
        Ok(channels[0])
    } else {
        tape.concat(&channels)
    }
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    /// `[d_in × 4h]`, gate blocks ordered input, forget, cell, output.
    pub w_ih: ParamId,
    /// `[h × 4h]`
    pub w_hh: ParamId,
    /// `[1 × 4h]`
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = store.add_uniform(format!("{prefix}.w_ih"), &[input_dim, 4 * hidden], 0.1, rng);
        let w_hh = store.add_uniform(format!("{prefix}.w_hh"), &[hidden, 4 * hidden], 0.1, rng);
        let bias = store.add_uniform(format!("{prefix}.b"), &[1, 4 * hidden], 0.1, rng);
        for v in &mut store.get_mut(bias).data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        Self {
            w_ih,
            w_hh,
            bias,
            hidden,
        }
    }

    /// Runs the LSTM over `x[n × d_in]` in the given direction and returns
    /// hidden states `[n × h]` in position order.
    pub fn run<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, reverse: bool) -> Result<Var> {
        let (n, _) = tape.value(x).dims2()?;
        if n == 0 {
            return Err(DolfinError::Empty("LSTM over an empty sequence".into()));
        }
        let h = self.hidden;
        let w_ih = tape.param(self.w_ih);
        let w_hh = tape.param(self.w_hh);
        let b = tape.param(self.bias);
        let projected = tape.linear(x, w_ih, b)?;
        let mut h_prev = tape.constant(Tensor::zeros(&[1, h]));
        let mut c_prev = tape.constant(Tensor::zeros(&[1, h]));
        let mut states = vec![h_prev; n];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            let xt = tape.row(projected, t)?;
            let recur = tape.matmul(h_prev, w_hh)?;
            let pre = tape.add(xt, recur)?;
            let hc = tape.lstm_cell(pre, c_prev)?;
            h_prev = tape.slice_cols(hc, 0, h)?;
            c_prev = tape.slice_cols(hc, h, h)?;
            states[t] = h_prev;
        }
        tape.stack_rows(&states)
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Conv(FilterBank),
    Bilstm { forward: LstmParams, backward: LstmParams },
}

impl Encoder {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        input_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            EncoderKind::Conv => Encoder::Conv(FilterBank::init(
                store,
                "conv",
                input_dim,
                &cfg.filter_sizes,
                cfg.filters_per_size,
                rng,
            )),
            EncoderKind::Bilstm => Encoder::Bilstm {
                forward: LstmParams::init(store, "lstm.fwd", input_dim, cfg.lstm_hidden, rng),
                backward: LstmParams::init(store, "lstm.bwd", input_dim, cfg.lstm_hidden, rng),
            },
        })
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Conv(_) => EncoderKind::Conv,
            Encoder::Bilstm { .. } => EncoderKind::Bilstm,
        }
    }

    /// Encodes `tokens[n × d_w]`. The convolutional encoder applies a ReLU
    /// to its feature maps; the BiLSTM emits `[forward h | backward h]`
    /// per position.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<EncodedSequence> {
        let (n, _) = tape.value(tokens).dims2()?;
        if n == 0 {
            return Err(DolfinError::Empty("cannot encode an empty sequence".into()));
        }
        let vectors = match self {
            Encoder::Conv(bank) => {
                let maps = conv1d_temporal(tape, tokens, bank, true)?;
                tape.relu(maps)
            }
            Encoder::Bilstm { forward, backward } => {
                let f = forward.run(tape, tokens, false)?;
                let b = backward.run(tape, tokens, true)?;
                tape.concat(&[f, b])?
            }
        };
        let width = tape.value(vectors).cols();
        Ok(EncodedSequence {
            vectors,
            len: n,
            width,
            kind: self.kind(),
        })
    }
}

/// `[backward half of position 0 | forward half of position n-1]`.
pub fn bilstm_endpoints<T: Scalar>(tape: &mut Tape<'_, T>, seq: &EncodedSequence) -> Result<Var> {
    if seq.kind != EncoderKind::Bilstm {
        return Err(DolfinError::InvalidArgument(
            "endpoint aggregation needs a BiLSTM encoding".into(),
        ));
    }
    let h = seq.width / 2;
    let first = tape.row(seq.vectors, 0)?;
    let last = tape.row(seq.vectors, seq.len - 1)?;
    let backward_first = tape.slice_cols(first, h, h)?;
    let forward_last = tape.slice_cols(last, 0, h)?;
    tape.concat(&[backward_first, forward_last])
}
