//! Fixtures shared by the benchmarks.

use dolfin::training::Encoded;
use dolfin::{Architecture, Classifier, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 5000;
pub const CLASSES: usize = 6;

/// Model at the default sizes: 300-d embeddings, 3/4/5 x 100 filters,
/// 100 LSTM units per direction, d = 20.
pub fn model(arch: Architecture) -> Classifier<f32> {
    let cfg = ModelConfig {
        latent_features: 20,
        ..ModelConfig::new(arch, VOCAB, CLASSES)
    };
    Classifier::new(cfg, None, 1).expect("valid config")
}

/// `n` random texts of `len` tokens.
pub fn texts(n: usize, len: usize, seed: u64) -> Vec<Encoded> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Encoded {
            tokens: (0..len).map(|_| rng.gen_range(2..VOCAB)).collect(),
            label: rng.gen_range(0..CLASSES),
        })
        .collect()
}
