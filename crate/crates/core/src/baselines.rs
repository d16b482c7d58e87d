//! Comparison heads: max-over-time pooling for the CNN and endpoint
//! concatenation for the BiLSTM, each followed by dropout and a
//! linear-softmax classifier.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoders::{bilstm_endpoints, EncodedSequence, EncoderKind};
use crate::error::{DolfinError, Result};
use crate::layers::LinearSoftmax;
use crate::tensor::Scalar;

/// CNN head over a convolutional encoding; returns logits.
pub fn cnn_forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    seq: &EncodedSequence,
    classifier: &LinearSoftmax,
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    if seq.kind != EncoderKind::Conv {
        return Err(DolfinError::InvalidArgument(
            "CNN head needs a convolutional encoding".into(),
        ));
    }
    let pooled = tape.maxpool_over_time(seq.vectors)?;
    let s = tape.dropout(pooled, dropout, rng);
    classifier.logits(tape, s)
}

/// BiLSTM head over a recurrent encoding; returns logits.
pub fn bilstm_forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    seq: &EncodedSequence,
    classifier: &LinearSoftmax,
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let ends = bilstm_endpoints(tape, seq)?;
    let s = tape.dropout(ends, dropout, rng);
    classifier.logits(tape, s)
}
