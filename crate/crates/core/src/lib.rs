//! Scalable semantic transfer (SST) for multi-domain semantic human parsing.
//!
//! One body can be labeled at several granularities: a coarse label set
//! (head / torso / arms / legs), a mid one that splits limbs, a fine one that
//! separates left from right and clothing from skin.  This crate trains a
//! single parsing network across such label domains at once, and transfers a
//! network pretrained on one domain to another.  The transfer signal comes
//! from three auxiliary modules:
//!
//! * [`msa`] — mask-guided semantic aggregation: pools pyramid features into
//!   per-category representations using ground-truth masks;
//! * [`mse`] — semantic embedding: a learnable per-domain category embedding
//!   refined by semantic-prompting attention layers against the aggregated
//!   representations;
//! * [`mst`] — semantic transfer: cross-domain attention (static at the
//!   embedding root, dynamic per layer) plus cosine consistency losses that
//!   pull the embeddings of related categories together.
//!
//! All three modules exist only at training time; inference needs the core
//! network and one head per domain, nothing else ([`eval::export_inference`]
//! enforces this).  Everything runs on CPU over a small hand-rolled
//! [`autodiff`] tape, deterministically: same config, data and platform give
//! bit-identical checkpoints and loss logs.
//!
//! The [`synth`] module generates the articulated-figure corpus used by the
//! examples and the test-suite; [`trainer`] drives universal (all domains at
//! once) and dedicated (pretrain + transfer) training; [`eval`] computes
//! mIoU-style metrics, runs the ablation grid and renders predictions.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod eval;
pub mod imgio;
pub mod msa;
pub mod mse;
pub mod mst;
pub mod net;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::SstError;
