//! Interleaved text-vision chain-of-thought generation driven by information gain.
//!
//! The engine decides *when* to look at the image by watching the shift of attention
//! towards visual tokens during decoding, and *what* to look at by greedily picking the
//! image regions whose insertion most reduces the entropy of the next-token distribution.
//! Models are reached through [`backend::StepBackend`]; [`backend::sim::SimOracle`] is a
//! deterministic stand-in whose entropy is an exact function of the evidence it is shown.

pub mod attention;
pub mod backend;
pub mod candidates;
pub mod config;
pub mod decode;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod infogain;
pub mod orchestrator;
pub mod render;
pub mod scalar;
pub mod stats;
pub mod trace;
pub mod trigger;

pub use error::{BackendError, Error, Result};
pub use geometry::{BBox, Cell, GridSpec, Region, RegionMask};
pub use scalar::Real;

/// Double-precision instances of the generic numeric types.
pub type TokenDistribution = infogain::TokenDistribution<f64>;
pub type AttentionSnapshot = attention::AttentionSnapshot<f64>;
pub type GridAttentionMap = attention::GridAttentionMap<f64>;
pub type Matrix = attention::Matrix<f64>;
pub type HiddenStates = attention::HiddenStates<f64>;

/// Single-precision variants for backends that report `f32` activations.
pub type TokenDistributionF32 = infogain::TokenDistribution<f32>;
pub type GridAttentionMapF32 = attention::GridAttentionMap<f32>;
pub type MatrixF32 = attention::Matrix<f32>;
