//! Correlated lockstep guided decoding for synthetic dataset generation.
//!
//! Several sequences are generated one token at a time in lockstep; at each
//! step every sequence's next-token distribution is tilted away from the
//! distributions of the other, partially generated, sequences. Plain few-shot
//! sampling and classifier-free guidance are included as baselines, along
//! with lexical diversity metrics and forward-pass accounting.

pub mod baselines;
pub mod guidance;
pub mod io;
pub mod lockstep;
pub mod logits;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod sampling;
pub mod trace;

pub use logits::{LogitError, LogitVector, TokenId, NEG_INF};
