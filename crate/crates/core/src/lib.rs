//! In-context segmentation at desk scale.
//!
//! A reference image plus its instance masks acts as a prompt: mask pooling
//! turns it into per-instance and per-category tokens, a fusion block
//! correlates those tokens with the target image features, and a dual-path
//! decoder emits three granularities of output at once — identical-object
//! masks, category instances, and a semantic label map. Training is
//! set-prediction (Hungarian matching for instances, fixed matching for
//! identities); video tracking runs on per-object memory banks with
//! score-decayed retention.
//!
//! Everything is deterministic given explicit seeds: same config, same bits.

pub mod encoder;
pub mod error;
pub mod grad;
pub mod interact;
pub mod infer;
pub mod layers;
pub mod losses;
pub mod mask;
pub mod memory;
pub mod metrics;
pub mod mformer;
pub mod params;
pub mod pnm;
pub mod rngutil;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
