//! Post-training checkpoint composition and black-box merge-weight search.
//!
//! The crate is organised around a small pipeline:
//!
//! * [`tensor`] — a single-file tensor container (8-byte length prefix,
//!   JSON header, packed little-endian data) used for every artifact that
//!   crosses a process boundary.
//! * [`vectors`] — distribution vectors: per-tensor parameter deltas between
//!   a fine-tuned checkpoint and its shared base, plus the composition rule
//!   that rebuilds a checkpoint from a weighted sum of such deltas.
//! * [`merge`] — merge baselines over distribution vectors: task arithmetic,
//!   TIES sign-consensus merging, and DARE random-drop sparsification.
//! * [`optimizer`] — a tree-structured Parzen estimator (plus grid search)
//!   over merge weights, with a persistent, resumable study log.
//! * [`evaluator`] — the black-box scoring contract: external subprocess
//!   evaluators and synthetic objectives for tests and rehearsal.
//! * [`analysis`] — similarity, truncated-SVD sparsification, and 2-D PCA
//!   projections of checkpoint collections.
//!
//! Numeric kernels are generic over [`Scalar`]; the concrete precisions used
//! by the pipeline are fixed by the [`TensorFloat`] and [`SearchFloat`]
//! aliases below.

pub mod analysis;
pub mod evaluator;
pub mod merge;
mod mixing;
pub mod optimizer;
pub mod scalar;
pub mod space;
pub mod tensor;
pub mod vectors;

pub use scalar::Scalar;

/// Working precision for tensor arithmetic (delta extraction, composition,
/// merging). Containers may store F16/BF16, but all arithmetic happens here.
pub type TensorFloat = f32;

/// Precision for search-space geometry, scores, densities, and accumulations.
pub type SearchFloat = f64;

/// Kernel-density estimator at search precision.
pub type Kde = optimizer::kde::TruncatedGaussianKde<SearchFloat>;

/// Good/bad density pair at search precision.
pub type DensityPair = optimizer::tpe::DensityModelPair<SearchFloat>;
