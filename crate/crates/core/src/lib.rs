//! Speech deepfake detection on top of frozen speech-model embeddings.
//!
//! A detector is split into a frozen extractor, which maps a waveform to a
//! time × feature embedding, and a small trainable head, which maps that
//! embedding to the likelihood that the clip is fake. This crate holds the
//! preprocessing, the heads with their hand-written backward passes, the
//! balanced-batch AdamW training loop, and the evaluation metrics.

pub mod audio;
pub mod data;
pub mod embedding;
pub mod fsutil;
pub mod head;
pub mod ingest;
pub mod metrics;
pub mod synth;
pub mod trainer;

pub use audio::{Waveform, CLIP_SAMPLES, SAMPLE_RATE};
pub use data::{DatasetManifest, Label, Partition, Utterance};
pub use embedding::{Embedding, EmbeddingMatrix, EmbeddingProvider, LayerStack, LayerWeights};
pub use head::{Architecture, HeadModel, Prediction};
pub use metrics::{MetricsReport, OverlapMatrix, RocCurve, ScoreRecord};
pub use trainer::{TrainConfig, TrainLog};
