//! The four text classifiers behind one type.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines::{bilstm_forward, cnn_forward};
use crate::bolf::{dolfin_forward, BagVector, BolfParams, LatentDistribution};
use crate::encoders::{Encoder, EncoderConfig, EncoderKind};
use crate::error::{DolfinError, Result};
use crate::layers::LinearSoftmax;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Cnn,
    Bilstm,
    DolfinConv,
    DolfinBilstm,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Cnn,
        Architecture::Bilstm,
        Architecture::DolfinConv,
        Architecture::DolfinBilstm,
    ];

    pub fn encoder_kind(self) -> EncoderKind {
        match self {
            Architecture::Cnn | Architecture::DolfinConv => EncoderKind::Conv,
            Architecture::Bilstm | Architecture::DolfinBilstm => EncoderKind::Bilstm,
        }
    }

    pub fn is_dolfin(self) -> bool {
        matches!(self, Architecture::DolfinConv | Architecture::DolfinBilstm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Cnn => "cnn",
            Architecture::Bilstm => "bilstm",
            Architecture::DolfinConv => "dolfin-conv",
            Architecture::DolfinBilstm => "dolfin-bilstm",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = DolfinError;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| DolfinError::InvalidArgument(format!("unknown model '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub filter_sizes: Vec<usize>,
    pub filters_per_size: usize,
    pub lstm_hidden: usize,
    /// Number of latent features `d` (DoLFIn only).
    pub latent_features: usize,
    /// Width `d_s` of the DoLFIn text vector.
    pub text_dim: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, vocab_size: usize, num_classes: usize) -> Self {
        Self {
            architecture,
            vocab_size,
            embed_dim: 300,
            num_classes,
            filter_sizes: vec![3, 4, 5],
            filters_per_size: 100,
            lstm_hidden: 100,
            latent_features: 20,
            text_dim: 100,
            dropout: 0.5,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            kind: self.architecture.encoder_kind(),
            filter_sizes: self.filter_sizes.clone(),
            filters_per_size: self.filters_per_size,
            lstm_hidden: self.lstm_hidden,
        }
    }

    /// Width of the vector fed to the final classifier.
    pub fn text_width(&self) -> usize {
        if self.architecture.is_dolfin() {
            self.text_dim
        } else {
            self.encoder().output_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if self.vocab_size < 2 || self.embed_dim == 0 || self.num_classes < 2 {
            return Err(DolfinError::InvalidArgument(format!(
                "vocabulary {}, embedding width {}, categories {}",
                self.vocab_size, self.embed_dim, self.num_classes
            )));
        }
        if self.architecture.is_dolfin() && (self.latent_features == 0 || self.text_dim == 0) {
            return Err(DolfinError::InvalidArgument("latent sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DolfinError::InvalidArgument(format!("dropout rate {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Head {
    MaxPool,
    Endpoints,
    Bolf(BolfParams),
}

/// Outputs of one forward pass. `latent` and `bag` are set for DoLFIn.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub latent: Option<LatentDistribution>,
    pub bag: Option<BagVector>,
}

/// Evaluation-mode outputs copied off the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    /// `p(f_j | w_i, s)` per position, DoLFIn only.
    pub latent: Option<Vec<Vec<f64>>>,
    pub bag: Option<Vec<f64>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Classifier<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    embedding: ParamId,
    encoder: Encoder,
    head: Head,
    classifier: LinearSoftmax,
}

impl<T: Scalar> Classifier<T> {
    /// Random initialisation from `seed`. `embeddings`, when given, must be
    /// `[vocab_size × embed_dim]`; otherwise rows are drawn from
    /// `U(-0.25, 0.25)` with a zero padding row.
    pub fn new(config: ModelConfig, embeddings: Option<Tensor<T>>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let table = match embeddings {
            Some(t) => {
                if t.shape() != [config.vocab_size, config.embed_dim] {
                    return Err(DolfinError::Shape(format!(
                        "embedding matrix {:?} for vocabulary {} x {}",
                        t.shape(),
                        config.vocab_size,
                        config.embed_dim
                    )));
                }
                t
            }
            None => {
                let mut t = Tensor::zeros(&[config.vocab_size, config.embed_dim]);
                for x in &mut t.data_mut()[config.embed_dim..] {
                    *x = T::of(rng.gen_range(-0.25..=0.25));
                }
                t
            }
        };
        let embedding = params.add("embedding", table);
        let encoder = Encoder::init(&config.encoder(), config.embed_dim, &mut params, &mut rng)?;
        let enc_width = config.encoder().output_width();
        let head = match config.architecture {
            Architecture::Cnn => Head::MaxPool,
            Architecture::Bilstm => Head::Endpoints,
            Architecture::DolfinConv | Architecture::DolfinBilstm => Head::Bolf(BolfParams::init(
                &mut params,
                enc_width,
                config.latent_features,
                config.text_dim,
                &mut rng,
            )?),
        };
        let classifier = LinearSoftmax::init(&mut params, "cls", config.text_width(), config.num_classes, &mut rng);
        Ok(Self {
            config,
            params,
            embedding,
            encoder,
            head,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn bolf_params(&self) -> Option<&BolfParams> {
        match &self.head {
            Head::Bolf(p) => Some(p),
            _ => None,
        }
    }

    pub fn classifier_layer(&self) -> &LinearSoftmax {
        &self.classifier
    }

    /// Records the forward pass for one text. Dropout is active only when
    /// `rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: &[usize],
        rng: Option<&mut R>,
    ) -> Result<ForwardPass> {
        if tokens.is_empty() {
            return Err(DolfinError::Empty("text has no tokens".into()));
        }
        let x = tape.embedding(self.embedding, tokens)?;
        let seq = self.encoder.encode(tape, x)?;
        let rate = self.config.dropout;
        Ok(match &self.head {
            Head::MaxPool => ForwardPass {
                logits: cnn_forward(tape, &seq, &self.classifier, rate, rng)?,
                latent: None,
                bag: None,
            },
            Head::Endpoints => ForwardPass {
                logits: bilstm_forward(tape, &seq, &self.classifier, rate, rng)?,
                latent: None,
                bag: None,
            },
            Head::Bolf(head) => {
                let (logits, latent, bag) = dolfin_forward(tape, head, &self.classifier, &seq, rate, rng)?;
                ForwardPass {
                    logits,
                    latent: Some(latent),
                    bag: Some(bag),
                }
            }
        })
    }

    /// Cross-entropy of one labelled text.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: &[usize],
        gold: usize,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let out = self.forward(tape, tokens, rng)?;
        tape.cross_entropy(out.logits, gold)
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<Prediction> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward::<ChaCha8Rng>(&mut tape, tokens, None)?;
        let probs_var = tape.softmax_rows(out.logits)?;
        let probs = tape.value(probs_var).to_f64_vec();
        let label = argmax(&probs);
        Ok(Prediction {
            probs,
            label,
            latent: out.latent.map(|l| tape.value(l.u).to_rows_f64()),
            bag: out.bag.map(|b| tape.value(b.r).to_f64_vec()),
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            config: self.config.clone(),
            params: self.params.cast(),
            embedding: self.embedding,
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            classifier: self.classifier.clone(),
        }
    }
}
