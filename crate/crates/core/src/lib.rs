//! Simulation and modeling-attack toolkit for delay-based PUFs.
//!
//! The crate models Arbiter PUFs, XOR Arbiter PUFs, Interpose PUFs and
//! digest-obfuscated wrappers, and implements the attacks that recover the
//! constituent delay models from query access alone:
//!
//! * the chosen-challenge attack, which measures how often responses flip
//!   across feature-space neighbors of a centroid challenge and fits one
//!   constituent at a time with CMA-ES,
//! * the reliability-based attack, which uses repeated measurements of the
//!   same challenge as the correlation target instead,
//! * a gradient-based multi-objective trainer that combines a logistic
//!   response loss with the same correlation objectives.
//!
//! [`theory`] holds closed-form results about flip probabilities together
//! with Monte Carlo validators, and [`dataset`] the collection and
//! persistence machinery shared by all attacks.

pub mod attacks;
pub mod combined;
pub mod dataset;
mod error;
pub mod optimizer;
pub mod puf;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use puf::{
    delay_difference, feature_transform, inverse_feature_transform, sample_apuf, Challenge,
    FeatureVector, NoiseKind, NoiseModel, PufInstance, PufOracle, PufTopology, WeightVector,
};
