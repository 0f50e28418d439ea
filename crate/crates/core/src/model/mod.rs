//! Character-level attentional encoder-decoder.
//!
//! The encoder is a stack of bidirectional LSTM layers over source symbol
//! embeddings. The final states of both directions of each layer are
//! concatenated and linearly projected to initialize the matching decoder
//! layer. The decoder is a stack of unidirectional LSTM layers whose top
//! output attends over the encoder states with a bilinear score. The context
//! vector and the decoder output pass through a `tanh` combination layer
//! before the projection onto the target vocabulary.
//!
//! Parameters are stored in `f64` but are always exactly representable as
//! `f32`, which is what checkpoints hold. All arithmetic is done in `f64`.

mod attention;
mod checkpoint;
mod lstm;
mod network;

use ndarray::{Array2, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use attention::{attend, masked_softmax};
pub use checkpoint::{from_bytes, load_model, save_model, to_bytes, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use network::{DecoderState, EncoderOutput, StepOutput};

use crate::snippets::{EncodedExample, PAD_ID};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("symbol id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("every attention position is masked")]
    AllMasked,
    #[error("batch has no target tokens")]
    EmptyMask,
    #[error("batch has no targets")]
    MissingTargets,
    #[error("batch is empty or contains an empty source")]
    EmptySource,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embedding_size: usize,
    /// Units per direction and layer.
    pub hidden_units: usize,
    pub layers: usize,
    pub dropout: f64,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size defaults for the given vocabularies.
    pub fn new(source_vocab_size: usize, target_vocab_size: usize) -> Self {
        ModelConfig {
            embedding_size: 700,
            hidden_units: 500,
            layers: 2,
            dropout: 0.3,
            source_vocab_size,
            target_vocab_size,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("embedding_size", self.embedding_size),
            ("hidden_units", self.hidden_units),
            ("layers", self.layers),
            ("source_vocab_size", self.source_vocab_size),
            ("target_vocab_size", self.target_vocab_size),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Weights of one LSTM layer, gates ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    /// `[input_size, 4H]`
    pub input: Array2<f64>,
    /// `[H, 4H]`
    pub recurrent: Array2<f64>,
    /// `[1, 4H]`
    pub bias: Array2<f64>,
}

impl LstmWeights {
    fn zeros(input_size: usize, hidden: usize) -> Self {
        LstmWeights {
            input: Array2::zeros((input_size, 4 * hidden)),
            recurrent: Array2::zeros((hidden, 4 * hidden)),
            bias: Array2::zeros((1, 4 * hidden)),
        }
    }

    pub fn hidden_units(&self) -> usize {
        self.recurrent.nrows()
    }
}

/// Projection from concatenated bidirectional encoder states to one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Bridge {
    /// `[2H, H]`
    pub hidden: Array2<f64>,
    pub hidden_bias: Array2<f64>,
    pub cell: Array2<f64>,
    pub cell_bias: Array2<f64>,
}

/// Every learnable tensor. [`Params::tensors`] fixes the canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `[V_src, E]`
    pub source_embedding: Array2<f64>,
    /// `[V_tgt, E]`
    pub target_embedding: Array2<f64>,
    pub encoder_forward: Vec<LstmWeights>,
    pub encoder_backward: Vec<LstmWeights>,
    pub bridge: Vec<Bridge>,
    pub decoder: Vec<LstmWeights>,
    /// Bilinear score matrix `[H, 2H]`.
    pub attention: Array2<f64>,
    /// `[2H + H, H]`, applied to `[context; decoder output]`.
    pub combine: Array2<f64>,
    /// `[H, V_tgt]`
    pub output: Array2<f64>,
    pub output_bias: Array2<f64>,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let e = cfg.embedding_size;
        let h = cfg.hidden_units;
        let enc_in = |l: usize| if l == 0 { e } else { 2 * h };
        let dec_in = |l: usize| if l == 0 { e } else { h };
        Params {
            source_embedding: Array2::zeros((cfg.source_vocab_size, e)),
            target_embedding: Array2::zeros((cfg.target_vocab_size, e)),
            encoder_forward: (0..cfg.layers).map(|l| LstmWeights::zeros(enc_in(l), h)).collect(),
            encoder_backward: (0..cfg.layers).map(|l| LstmWeights::zeros(enc_in(l), h)).collect(),
            bridge: (0..cfg.layers)
                .map(|_| Bridge {
                    hidden: Array2::zeros((2 * h, h)),
                    hidden_bias: Array2::zeros((1, h)),
                    cell: Array2::zeros((2 * h, h)),
                    cell_bias: Array2::zeros((1, h)),
                })
                .collect(),
            decoder: (0..cfg.layers).map(|l| LstmWeights::zeros(dec_in(l), h)).collect(),
            attention: Array2::zeros((h, 2 * h)),
            combine: Array2::zeros((3 * h, h)),
            output: Array2::zeros((h, cfg.target_vocab_size)),
            output_bias: Array2::zeros((1, cfg.target_vocab_size)),
        }
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.source_embedding, &self.target_embedding];
        for w in self.encoder_forward.iter().chain(&self.encoder_backward) {
            v.extend([&w.input, &w.recurrent, &w.bias]);
        }
        for b in &self.bridge {
            v.extend([&b.hidden, &b.hidden_bias, &b.cell, &b.cell_bias]);
        }
        for w in &self.decoder {
            v.extend([&w.input, &w.recurrent, &w.bias]);
        }
        v.extend([&self.attention, &self.combine, &self.output, &self.output_bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![&mut self.source_embedding, &mut self.target_embedding];
        for w in self.encoder_forward.iter_mut().chain(self.encoder_backward.iter_mut()) {
            v.extend([&mut w.input, &mut w.recurrent, &mut w.bias]);
        }
        for b in &mut self.bridge {
            v.extend([&mut b.hidden, &mut b.hidden_bias, &mut b.cell, &mut b.cell_bias]);
        }
        for w in &mut self.decoder {
            v.extend([&mut w.input, &mut w.recurrent, &mut w.bias]);
        }
        v.extend([
            &mut self.attention,
            &mut self.combine,
            &mut self.output,
            &mut self.output_bias,
        ]);
        v
    }

    /// Human-readable tensor names, aligned with [`Params::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = vec!["source_embedding".to_string(), "target_embedding".to_string()];
        for (dir, ws) in [("fwd", &self.encoder_forward), ("bwd", &self.encoder_backward)] {
            for l in 0..ws.len() {
                for part in ["input", "recurrent", "bias"] {
                    v.push(format!("encoder.{dir}.{l}.{part}"));
                }
            }
        }
        for l in 0..self.bridge.len() {
            for part in ["hidden", "hidden_bias", "cell", "cell_bias"] {
                v.push(format!("bridge.{l}.{part}"));
            }
        }
        for l in 0..self.decoder.len() {
            for part in ["input", "recurrent", "bias"] {
                v.push(format!("decoder.{l}.{part}"));
            }
        }
        v.extend(["attention", "combine", "output", "output_bias"].map(String::from));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Gradients of the loss, shaped exactly like [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Params);

impl Gradients {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Gradients(Params::zeros(cfg))
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Adds `other` in place, e.g. to combine shards of one batch.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

impl Model {
    /// Uniform initialization in `[-0.1, 0.1]` from `cfg.seed`, with forget-gate
    /// biases set to 1.
    pub fn init(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Params::zeros(&cfg);
        for t in params.tensors_mut() {
            t.mapv_inplace(|_| quantize(rng.gen_range(-INIT_SCALE..=INIT_SCALE)));
        }
        let h = cfg.hidden_units;
        for w in params
            .encoder_forward
            .iter_mut()
            .chain(params.encoder_backward.iter_mut())
            .chain(params.decoder.iter_mut())
        {
            w.bias.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
        }
        Ok(Model { config: cfg, params })
    }

    /// A model with every weight zero; its logits are uniform.
    pub fn zeros(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = Params::zeros(&cfg);
        Ok(Model { config: cfg, params })
    }

    /// Clips `grads` to `clip_norm` in global L2 norm, then takes one SGD step.
    /// Returns the norm before clipping.
    pub fn sgd_update(&mut self, grads: &Gradients, lr: f64, clip_norm: f64) -> Result<f64, ModelError> {
        if !(lr > 0.0) {
            return Err(ModelError::Config(format!("learning rate must be positive, got {lr}")));
        }
        let norm = grads.global_norm();
        let scale = if clip_norm > 0.0 && norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };
        if !(norm * scale).is_finite() {
            return Err(ModelError::NonFiniteGradient);
        }
        let step = lr * scale;
        for (w, g) in self.params.tensors_mut().into_iter().zip(grads.0.tensors()) {
            Zip::from(w).and(g).for_each(|w, &g| *w = quantize(*w - step * g));
        }
        Ok(norm)
    }
}

/// Dropout switch for one forward pass. Masks are drawn from `rng` in a fixed
/// order, so a seeded rng reproduces the same masks.
pub struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut dyn RngCore) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.p > 0.0 && self.rng.is_some()
    }

    /// Inverted-dropout mask, or `None` when inactive.
    pub(crate) fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        if self.p <= 0.0 {
            return None;
        }
        let rng = self.rng.as_mut()?;
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        Some(Array2::from_shape_fn((rows, cols), |_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

/// Padded id matrices for a group of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, S]`, padded with `PAD_ID`.
    pub source: Array2<u32>,
    pub source_lengths: Vec<usize>,
    /// `[B, T]` framed target ids, padded with `PAD_ID`.
    pub target: Option<Array2<u32>>,
    pub target_lengths: Vec<usize>,
    /// `[B, T - 1]`: 1 where the next-symbol prediction is a real token.
    pub loss_mask: Option<Array2<f64>>,
}

impl Batch {
    pub fn from_sources(sources: &[&[u32]]) -> Self {
        let (source, source_lengths) = pad(sources);
        Batch {
            source,
            source_lengths,
            target: None,
            target_lengths: Vec::new(),
            loss_mask: None,
        }
    }

    /// Batch of examples; targets are kept only when every example has one.
    pub fn from_examples(examples: &[&EncodedExample]) -> Self {
        let sources: Vec<&[u32]> = examples.iter().map(|e| e.source.as_slice()).collect();
        let mut batch = Batch::from_sources(&sources);
        let targets: Option<Vec<&[u32]>> = examples.iter().map(|e| e.target.as_deref()).collect();
        if let Some(targets) = targets {
            let (target, target_lengths) = pad(&targets);
            let width = target.ncols().saturating_sub(1);
            let mask = Array2::from_shape_fn((targets.len(), width), |(b, t)| {
                if t + 1 < target_lengths[b] {
                    1.0
                } else {
                    0.0
                }
            });
            batch.target = Some(target);
            batch.target_lengths = target_lengths;
            batch.loss_mask = Some(mask);
        }
        batch
    }

    pub fn size(&self) -> usize {
        self.source.nrows()
    }

    /// Number of predicted target tokens.
    pub fn target_tokens(&self) -> f64 {
        self.loss_mask.as_ref().map_or(0.0, |m| m.sum())
    }
}

fn pad(rows: &[&[u32]]) -> (Array2<u32>, Vec<usize>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let lengths: Vec<usize> = rows.iter().map(|r| r.len()).collect();
    let m = Array2::from_shape_fn((rows.len(), width), |(b, t)| {
        rows[b].get(t).copied().unwrap_or(PAD_ID)
    });
    (m, lengths)
}
