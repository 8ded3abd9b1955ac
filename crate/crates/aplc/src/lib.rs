//! Training and evaluation engine for extreme multi-label text classification
//! built around an adaptive clustered output layer.
//!
//! The label set is partitioned by frequency into a head cluster and several
//! tail clusters with geometrically shrinking hidden dimensions. The head
//! cluster (plus one gate column per tail) is evaluated for every sample;
//! a tail cluster is evaluated only when a sample in the batch has a positive
//! label inside it. On Zipf-distributed label sets this cuts both the
//! parameter count and the per-batch compute of the output layer by a large
//! factor while keeping per-label binary cross entropy semantics.
//!
//! Crate layout:
//!  - [`corpus`]: sparse dataset ingestion, label statistics, batch iteration
//!  - [`partition`]: frequency partitioning of the label set into clusters
//!  - [`numerics`]: dense/sparse matrix kernels, stable losses, AdamW,
//!    finite-difference gradient oracle, FLOP instrumentation
//!  - [`layer`]: the clustered output layer (forward, loss, backward,
//!    prediction, parameter/FLOP accounting)
//!  - [`encoder`]: sparse-input encoder producing the hidden state
//!  - [`schedule`]: slanted triangular learning rate with per-group rates
//!  - [`model`]: versioned binary model container
//!  - [`trainer`]: end-to-end training loop with checkpointing
//!  - [`eval`]: precision-at-k, cluster access probabilities, analytic and
//!    measured size/compute models
//!
//! All batch-level inner loops are data parallel over output rows (rayon,
//! behind the default `parallel` feature). Results are bitwise identical to
//! sequential execution because every output element is written by exactly
//! one task with a fixed-order inner reduction; [`parallel::set_threads`]
//! selects between the two paths at runtime.

pub mod corpus;
pub mod encoder;
pub mod layer;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod partition;
pub mod rng;
pub mod schedule;

pub use corpus::{Dataset, LabelStats, Sample, SparseVector};
pub use layer::{AccessSet, AplcGradients, AplcLayer, ForwardPass, InferenceMode};
pub use numerics::Matrix;
pub use partition::{LabelClusters, PartitionSpec};
