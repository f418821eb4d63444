//! Attribute-conditioned autoregressive transformer.
//!
//! All parameters live in one flat `f64` buffer described by a
//! [`ParamLayout`]; forward and backward passes are written out by hand.

mod attention;
mod checkpoint;
mod classifier;
mod gradcheck;
mod net;
mod params;
mod sample;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
pub use classifier::{ClassifierConfig, TransformerClassifier};
pub use gradcheck::{gradient_check, GroupCheck};
pub use net::{loss, Forward, LossValue};
pub use params::{LayerSlots, ParamLayout, Slot};
pub use sample::{generate, generate_from_bits, nucleus, sample_logits, sample_top_p, Decoder, SamplerConfig};
pub use train::{lr_schedule, train, Adam, StepLog, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::score::VOCAB_SIZE;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub attr_dim: usize,
    pub attention: AttentionKind,
}

impl ModelConfig {
    /// Full-size configuration (6 layers, width 512).
    pub fn full(attr_dim: usize) -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            d_model: 512,
            d_ffn: 2048,
            max_len: 1280,
            vocab_size: VOCAB_SIZE,
            dropout: 0.1,
            attr_dim,
            attention: AttentionKind::Linear,
        }
    }

    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk(attr_dim: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ffn: 128,
            max_len: 256,
            vocab_size: VOCAB_SIZE,
            dropout: 0.0,
            attr_dim,
            attention: AttentionKind::Linear,
        }
    }

    /// Used by gradient checks and unit tests.
    pub fn tiny(attr_dim: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 1,
            d_model: 16,
            d_ffn: 32,
            max_len: 16,
            vocab_size: VOCAB_SIZE,
            dropout: 0.0,
            attr_dim,
            attention: AttentionKind::Linear,
        }
    }

    pub fn by_name(name: &str, attr_dim: usize) -> Option<Self> {
        match name {
            "full" => Some(Self::full(attr_dim)),
            "desk" => Some(Self::desk(attr_dim)),
            "tiny" => Some(Self::tiny(attr_dim)),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.max_len == 0 || self.vocab_size == 0 || self.d_ffn == 0 {
            return bad("max_len, vocab_size and d_ffn must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    layout: ParamLayout,
}

impl ModelState {
    /// Weights ~ N(0, 0.02) for embeddings, N(0, 1/fan_in) for projections
    /// (residual outputs further scaled by 1/sqrt(2 n_layers)); biases zero,
    /// layer-norm gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |params: &mut [f64], s: Slot, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[s.range()] {
                *p = n.sample(&mut rng);
            }
        };
        let resid = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let fan = |s: Slot| 1.0 / (s.rows.max(1) as f64).sqrt();
        fill(&mut params, layout.tok_emb, 0.02);
        fill(&mut params, layout.pos_emb, 0.02);
        fill(&mut params, layout.attr_w1, fan(layout.attr_w1));
        fill(&mut params, layout.attr_w2, fan(layout.attr_w2));
        for l in &layout.layers {
            for s in [l.wq, l.wk, l.wv] {
                fill(&mut params, s, fan(s));
            }
            fill(&mut params, l.wo, fan(l.wo) * resid);
            fill(&mut params, l.ffn_w1, fan(l.ffn_w1));
            fill(&mut params, l.ffn_w2, fan(l.ffn_w2) * resid);
            for g in [l.ln1_g, l.ln2_g] {
                params[g.range()].fill(1.0);
            }
        }
        params[layout.lnf_g.range()].fill(1.0);
        Ok(Self { config, params, layout })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::ShapeMismatch(format!("{} parameters, layout needs {}", params.len(), layout.total)));
        }
        Ok(Self { config, params, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}
