//! Edge speculative decoding.
//!
//! Edge devices draft tokens with small models and a shared server verifies
//! batched drafts against one larger target model. This crate holds the
//! sampling math ([`specdec`]), model stand-ins ([`models`]), the wire
//! format ([`protocol`]), the device state machine ([`device`]), the
//! verification server ([`server`]), the network layer and discrete-event
//! simulator ([`netsim`]), and the evaluation harness ([`experiments`]).

pub mod device;
pub mod experiments;
pub mod models;
pub mod netsim;
pub mod protocol;
pub mod rng;
pub mod server;
pub mod specdec;

pub use models::{LanguageModel, ModelProfile, QuantBits};
pub use rng::{PositionalUniforms, RngStream, UniformSource};
pub use specdec::{DraftBlock, ProbVector, SpecError, TokenId, VerifyOutcome};
