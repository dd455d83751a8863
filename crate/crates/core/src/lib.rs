//! Exemplar-conditioned hierarchical recurrent encoder-decoder for
//! goal-oriented dialogue generation.
//!
//! The crate covers the whole experimental pipeline: corpus preparation
//! ([`corpus`], [`text`]), exemplar retrieval ([`retrieval`]), a small
//! reverse-mode autodiff engine ([`autodiff`]), the HRED and Exemplar-HRED
//! models ([`model`]), training ([`training`]), evaluation metrics
//! ([`metrics`]) and the stage driver used by the CLI ([`pipeline`]).

pub mod corpus;
pub mod io;
pub mod text;
pub mod autodiff;
pub mod model;
pub mod training;
pub mod metrics;
pub mod retrieval;
pub mod synth;
pub mod pipeline;
