//! Mixed-precision weight quantization for DAG-represented networks.
//!
//! The crate covers the full pipeline:
//!
//! * [`quant`] — uniform affine and k-means weight quantizers plus exact
//!   bit-cost accounting.
//! * [`graph`] — operator-graph IR, synthetic model families, subgraph
//!   catalogs and search-space counting.
//! * [`sampler`] — seeded, deduplicated sampling of quantization configs.
//! * [`surrogate`] — a small message-passing network trained with ranking
//!   losses; hop-level embedding norms attribute sensitivity to layers.
//! * [`ensemble`] — k-fold surrogate ensembles and greedy config builders
//!   at operator and block granularity.
//! * [`oracle`] — deterministic toy models that score configs end to end,
//!   corpus generation and Pareto frontiers.
//! * [`persist`] — binary tensor dumps, JSON manifests and digest-stable
//!   artifact writing.

pub mod ensemble;
pub mod error;
pub mod graph;
pub mod oracle;
pub mod persist;
pub mod quant;
pub mod sampler;
pub mod surrogate;
pub mod tape;

pub use error::{Error, Result};
