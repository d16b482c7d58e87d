//! The bag-of-latent-features head.
//!
//! Each context vector `w_i` is mapped by a shared linear-softmax layer to
//! a distribution `u_i` over `d` latent features. The text is represented
//! by the truncated sum `r = min(1, Σ_i u_i)` and then by
//! `s = ReLU(Σ_j r_j f_j)`, where `f_j` is the learned vector of feature
//! `j`. Because `u_i[j] = p(f_j | w_i, s)` is a proper distribution, the
//! support of each word for each category can be read off afterwards
//! (see [`crate::interpret`]).

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoders::EncodedSequence;
use crate::error::{DolfinError, Result};
use crate::layers::LinearSoftmax;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

/// Parameters of the head. The classifier layer is shared with the
/// baselines and lives in [`LinearSoftmax`].
#[derive(Clone, Debug)]
pub struct BolfParams {
    /// `[d_enc × d]`, shared by every position.
    pub lsl_weight: ParamId,
    /// `[1 × d]`
    pub lsl_bias: ParamId,
    /// `[d × d_s]`, row `j` is the vector of feature `j`.
    pub feature_table: ParamId,
    pub input_width: usize,
    pub latent_features: usize,
    pub text_dim: usize,
}

/// `u[i][j] = p(f_j | w_i, s)`, shape `[n × d]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentDistribution {
    pub u: Var,
}

/// `r ∈ [0,1]^d`, shape `[1 × d]`.
#[derive(Clone, Copy, Debug)]
pub struct BagVector {
    pub r: Var,
}

impl BolfParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        input_width: usize,
        latent_features: usize,
        text_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if latent_features == 0 || text_dim == 0 {
            return Err(DolfinError::InvalidArgument(
                "latent feature count and text width must be positive".into(),
            ));
        }
        let lsl_bound = (1.0 / input_width as f64).sqrt();
        let lsl_weight = store.add_uniform("lsl.w", &[input_width, latent_features], lsl_bound, rng);
        let lsl_bias = store.add_uniform("lsl.b", &[1, latent_features], lsl_bound, rng);
        let feature_bound = (1.0 / latent_features as f64).sqrt();
        let feature_table = store.add_uniform("features", &[latent_features, text_dim], feature_bound, rng);
        Ok(Self {
            lsl_weight,
            lsl_bias,
            feature_table,
            input_width,
            latent_features,
            text_dim,
        })
    }

    pub fn latent_distributions<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        seq: &EncodedSequence,
    ) -> Result<LatentDistribution> {
        if seq.width != self.input_width {
            return Err(DolfinError::Shape(format!(
                "encoder width {} but the latent layer expects {}",
                seq.width, self.input_width
            )));
        }
        let w = tape.param(self.lsl_weight);
        let b = tape.param(self.lsl_bias);
        let scores = tape.linear(seq.vectors, w, b)?;
        Ok(LatentDistribution {
            u: tape.softmax_rows(scores)?,
        })
    }

    /// `s = ReLU(r · F)`, followed by dropout when `rng` is given.
    pub fn compose_text_vector<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        bag: &BagVector,
        dropout: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let features = tape.param(self.feature_table);
        let mixed = tape.matmul(bag.r, features)?;
        let s = tape.relu(mixed);
        Ok(tape.dropout(s, dropout, rng))
    }
}

/// `r = min(1, Σ_i u_i)`.
pub fn truncated_sum<T: Scalar>(tape: &mut Tape<'_, T>, dist: &LatentDistribution) -> Result<BagVector> {
    let (n, _) = tape.value(dist.u).dims2()?;
    if n == 0 {
        return Err(DolfinError::Empty("truncated sum over zero positions".into()));
    }
    let total = tape.sum_rows(dist.u)?;
    Ok(BagVector {
        r: tape.clamp_max_one(total),
    })
}

/// Full head: latent distributions, bag, text vector, logits.
pub fn dolfin_forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    head: &BolfParams,
    classifier: &LinearSoftmax,
    seq: &EncodedSequence,
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<(Var, LatentDistribution, BagVector)> {
    let dist = head.latent_distributions(tape, seq)?;
    let bag = truncated_sum(tape, &dist)?;
    let s = head.compose_text_vector(tape, &bag, dropout, rng)?;
    let logits = classifier.logits(tape, s)?;
    Ok((logits, dist, bag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq_from(tape: &mut Tape<'_, f64>, rows: &[Vec<f64>]) -> EncodedSequence {
        let t = Tensor::from_rows(rows).unwrap();
        let (len, width) = t.dims2().unwrap();
        EncodedSequence {
            vectors: tape.constant(t),
            len,
            width,
            kind: EncoderKind::Conv,
        }
    }

    fn head(d_enc: usize, d: usize, d_s: usize, seed: u64) -> (ParamStore<f64>, BolfParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = BolfParams::init(&mut store, d_enc, d, d_s, &mut rng).unwrap();
        (store, h)
    }

    #[test]
    fn zero_lsl_gives_uniform_rows() {
        let (mut store, h) = head(3, 4, 2, 0);
        store.get_mut(h.lsl_weight).fill(0.0);
        store.get_mut(h.lsl_bias).fill(0.0);
        let mut tape = Tape::with_params(&store);
        let seq = seq_from(&mut tape, &[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]);
        let dist = h.latent_distributions(&mut tape, &seq).unwrap();
        for &v in tape.value(dist.u).data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (store, h) = head(3, 4, 2, 0);
        let mut tape = Tape::with_params(&store);
        let seq = seq_from(&mut tape, &[vec![1.0, 2.0]]);
        assert!(h.latent_distributions(&mut tape, &seq).is_err());
    }

    #[test]
    fn truncation_cases() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::from_rows(&[vec![0.2, 0.8]]).unwrap());
        let bag = truncated_sum(&mut tape, &LatentDistribution { u }).unwrap();
        assert_eq!(tape.value(bag.r).data(), &[0.2, 0.8]);

        let u = tape.constant(Tensor::from_rows(&[vec![0.9, 0.1], vec![0.7, 0.3], vec![0.7, 0.3]]).unwrap());
        let bag = truncated_sum(&mut tape, &LatentDistribution { u }).unwrap();
        let r = tape.value(bag.r).data();
        assert_eq!(r[0], 1.0);
        assert!((r[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn text_vector_edge_cases() {
        let (store, h) = head(3, 3, 4, 1);
        let mut tape = Tape::with_params(&store);
        let zero = tape.constant(Tensor::zeros(&[1, 3]));
        let s = h
            .compose_text_vector::<f64, ChaCha8Rng>(&mut tape, &BagVector { r: zero }, 0.5, None)
            .unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));

        let one_hot = tape.constant(Tensor::row_vector(&[0.0, 1.0, 0.0]));
        let s = h
            .compose_text_vector::<f64, ChaCha8Rng>(&mut tape, &BagVector { r: one_hot }, 0.5, None)
            .unwrap();
        let f1: Vec<f64> = store.get(h.feature_table).row(1).iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(tape.value(s).data(), f1.as_slice());
    }

    #[test]
    fn zero_classifier_gives_uniform_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let h = BolfParams::init(&mut store, 3, 4, 5, &mut rng).unwrap();
        let cls = LinearSoftmax::init(&mut store, "cls", 5, 6, &mut rng);
        store.get_mut(cls.weight).fill(0.0);
        store.get_mut(cls.bias).fill(0.0);
        let mut tape = Tape::with_params(&store);
        let seq = seq_from(&mut tape, &[vec![0.3, -0.2, 0.9], vec![1.0, 1.0, -1.0]]);
        let (logits, _, _) = dolfin_forward::<f64, ChaCha8Rng>(&mut tape, &h, &cls, &seq, 0.5, None).unwrap();
        let p = tape.softmax_rows(logits).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    fn random_u(rows: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    fn bag_of(rows: &[Vec<f64>]) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::from_rows(rows).unwrap());
        let bag = truncated_sum(&mut tape, &LatentDistribution { u }).unwrap();
        tape.value(bag.r).to_f64_vec()
    }

    #[test]
    fn truncated_sum_matches_direct_recompute() {
        let u = random_u(5, 10, 42);
        let r = bag_of(&u);
        for j in 0..10 {
            let col: f64 = u.iter().map(|row| row[j]).sum();
            assert_eq!(r[j], col.min(1.0));
        }
    }

    proptest! {
        #[test]
        fn bag_is_order_invariant_and_bounded(seed in 0u64..1000, n in 1usize..8, d in 1usize..12) {
            let u = random_u(n, d, seed);
            let r = bag_of(&u);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let mut rev = u.clone();
            rev.reverse();
            let r_rev = bag_of(&rev);
            for (a, b) in r.iter().zip(&r_rev) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn duplicating_a_word_never_shrinks_the_bag(seed in 0u64..1000, d in 1usize..12) {
            let u = random_u(1, d, seed);
            let once = bag_of(&u);
            let twice = bag_of(&[u[0].clone(), u[0].clone()]);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!(b >= a);
            }
        }
    }
}
