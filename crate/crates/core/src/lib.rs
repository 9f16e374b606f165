//! Black-box adversarial reprogramming.
//!
//! Learns a universal additive input program `P = tanh(W ⊙ M)` and a
//! many-to-one label mapping that repurpose a fixed classifier, observed only
//! through input-to-score queries, for a new classification task. Gradients
//! are estimated from loss evaluations alone; a white-box baseline with exact
//! gradients is included for comparison.

pub mod dataio;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod mapping;
pub mod oracle;
pub mod program;
pub mod toymodel;
pub mod trainer;
pub mod zoo;

pub use error::{Error, Result};
