//! Context compilation for small decoder-only transformers.
//!
//! A token context is distilled into `K` trainable buffer tokens through a
//! disposable, stage-gated low-rank adapter. After training, the buffer's
//! per-layer key/value cache is all that remains: plain data that any copy of
//! the frozen base model can attend to.
//!
//! The crate is `no_std` (with `alloc`). Transcendental functions come from
//! `libm` so results are bit-reproducible across platforms. File formats,
//! configuration documents and the command-line harness live in the `lcc`
//! companion crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod artifact;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod kv;
pub mod lora;
pub mod mask;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use artifact::{attach, BufferArtifact, StorageDtype};
pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use kv::KvCache;
pub use lora::{LoraAdapter, Projection};
pub use mask::{build_segment_mask, Segment, SegmentLayout, SegmentMask, SegmentSet};
pub use model::{Fingerprint, ModelConfig, ModelWeights};
pub use rng::RngState;
pub use tensor::Tensor;
pub use trainer::{compile, BufferEmbeddings, CompileConfig, LossKind, TrainReport};
