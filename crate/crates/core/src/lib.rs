//! Preference-aligned listener facial-expression generation.
//!
//! Listener behaviour is a sequence of expression and pose coefficients,
//! discretized into tokens and generated by a small autoregressive policy
//! conditioned on the speaker's video features and transcript. The policy
//! is trained by supervised imitation, then aligned with ranked feedback via
//! direct preference optimization.

pub mod checkpoint;
pub mod annotation;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod dpo;
pub mod error;
pub mod face;
pub mod frontend;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod preference;
pub mod sft;
pub mod types;

pub use checkpoint::Checkpoint;
pub use codec::{ActionTokenSeq, BinSpec};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use frontend::{DualFeature, Frame, Frontend, SpeakerContext};
pub use policy::{PolicyHyper, PolicyParams, SamplingConfig};
pub use preference::{CandidateGroup, PreferencePair, RatingRecord, RatingWeights};
pub use types::{ActionDims, FaceAction};
