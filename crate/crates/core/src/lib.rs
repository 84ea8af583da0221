//! Weakly-supervised video salient object detection at desk scale:
//! fixation-guided query initialization, semantic/locality query selection,
//! intra/inter-video contrastive training with memory banks, online
//! inference, and saliency metrics, all over a synthetic scene simulator
//! with finite-difference gradient verification.

pub mod error;
pub mod iimc;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod pse;
pub mod scenegen;
pub mod slq;
pub mod testutil;
pub mod trainer;

pub use error::{EgcError, Result};
pub use numerics::Tensor;
