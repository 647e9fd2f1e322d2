//! Dual-branch sequential recommender core.
//!
//! Items carry two identifiers: a unique hash ID (HID) backed by a learnable
//! embedding row, and a semantic ID (SID) — an L-tuple of discrete codes from
//! a trained vector quantizer over dense item embeddings. The model fuses the
//! L code-level views with intent-conditioned weights, injects semantics into
//! the HID sequence through multi-granularity cross attention, aligns the two
//! spaces with code-guided and masked-granularity contrastive losses, and
//! trains with a pairwise ranking objective. Evaluation stratifies ranking
//! metrics by item popularity (overall / head / tail / five buckets).

pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod opt;
pub mod presets;
pub mod quantizer;
pub mod rng;
pub mod semantics;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
