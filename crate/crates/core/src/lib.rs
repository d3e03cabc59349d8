//! Self-supervised graph representation learning with a masked
//! graph-transformer autoencoder.
//!
//! The pieces, bottom up:
//!
//! * [`graph`] — data model, TU/JSONL parsers, shortest-path precomputation,
//!   k-fold splitting, synthetic generators;
//! * [`tensor`] — dense tensors, the reverse-mode gradient tape, AdamW, and
//!   finite-difference gradient checking;
//! * [`layer`] — the transformer layer with degree, shortest-path-distance,
//!   and edge-path attention encodings;
//! * [`model`] — mask sampling, visible-subgraph encoding, mask-token
//!   insertion, shallow decoding, and the reconstruction objective;
//! * [`train`] — padded batching, the warmup/decay schedule, early stopping,
//!   checkpointing, and fine-tuning;
//! * [`eval`] — pooled graph embeddings, a linear SVM probe, and k-fold
//!   cross-validated metrics;
//! * [`mem`] — the analytic peak-memory estimate and the instrumented
//!   measurement it is checked against.
//!
//! All numeric code is generic over [`scalar::Scalar`]; the aliases below
//! pin the `f64` instantiation used by the training harness and the CLI.

pub mod eval;
pub mod graph;
pub mod layer;
pub mod mem;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

/// Default double-precision instantiations.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type OptimizerState = tensor::OptimizerState<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type EmbeddingTable = eval::EmbeddingTable<f64>;
pub type ProbeModel = eval::ProbeModel<f64>;
