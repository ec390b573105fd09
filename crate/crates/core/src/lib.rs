//! Next-token perception score: alignment between the feature subspace a
//! representation uses for next-token prediction and the one it uses for a
//! downstream classification task, computed from streamed second moments.

pub mod analysis;
pub mod error;
pub mod linalg;
pub mod scalar;
pub mod stats;
pub mod subspace;
pub mod synth;

pub use error::{NtpsError, Result};
pub use linalg::{SymMatrix, RegularizationInfo};
pub use scalar::Scalar;
pub use stats::{Moments, Pooling, SentenceSample, StatsMeta, SufficientStats};
pub use subspace::{autoregressive_subspace, k_from_proportion, ntps, perception_subspace, Subspace, SubspaceKind};

pub type Stats64 = SufficientStats<f64>;
pub type Stats32 = SufficientStats<f32>;
pub type Moments64 = Moments<f64>;
pub type Moments32 = Moments<f32>;
pub type Sample64 = SentenceSample<f64>;
pub type Sample32 = SentenceSample<f32>;
pub type Subspace64 = Subspace<f64>;
