//! Emotion-conditioned symbolic music generation through music attributes.
//!
//! Two stages: emotions are mapped to concrete attribute values by supervised
//! clustering over a labeled corpus ([`mapping`]), and an attribute-conditioned
//! autoregressive transformer ([`model`]) turns those values into music.

pub mod midi;
pub mod score;
pub mod emotion;
pub mod features;
pub mod forest;
pub mod mapping;
pub mod model;
pub mod eval;
pub mod dataset;
pub mod pipeline;

pub use dataset::{split_dataset, synth_corpus, synth_scores, Manifest, SynthSpec};
pub use emotion::EmotionQuadrant;
pub use features::{extract_features, AttributeVector, CorpusMatrix, FeatureCatalog};
pub use forest::{feature_importance, select_attributes, train_forest, LabeledCorpus, RandomForest, SelectionConfig};
pub use mapping::{binarize, compute_mapping, compute_medians, BitVector, MappingMethod, MappingTable};
pub use midi::{parse_midi, write_midi, MidiFile};
pub use model::{generate, ModelConfig, ModelState, SamplerConfig, TrainConfig};
pub use pipeline::{run_pipeline, PipelineConfig};
pub use score::{score_to_tokens, tokens_to_score, Note, Score, TokenSequence};
