//! Joint inference of latent reply-to structure in multi-party dialogue and
//! pre-training of a discourse-aware encoder.
//!
//! Training runs in two stages. Stage one alternates single-turn addressee
//! inference (E-step) with addressee-aware context-response matching (M-step).
//! Stage two extends the latent variable to the full reply-to graph and adds a
//! graph-prediction head trained variationally against a prior assembled from
//! the E-step posteriors.

pub mod config;
pub mod corpus;
pub mod em;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod vi;

pub use error::{Error, Result};
