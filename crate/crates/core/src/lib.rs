//! Joint language-model and recommendation training over text-serialized
//! user behavior logs.
//!
//! A user's interaction history is rendered as item descriptions joined by a
//! separator token and closed by an end-of-history token. A small causal
//! transformer is trained on that text with a next-token objective and,
//! jointly, with a two-tower pair score computed from the hidden state at the
//! end-of-history position. The crate also covers frozen-backbone linear
//! probes, ranking evaluation and a Hessian eigenvalue probe.

pub mod bbpe;
pub mod corpus;
pub mod curvature;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;
pub mod transfer;

mod util;
