//! Single-positive multi-label classification with a correlation-graph
//! refined cosine head and adversarial training.
//!
//! Every training image carries exactly one observed label even though
//! several classes may apply. The classifier scores a frozen-backbone image
//! embedding against learnable class centers; a small GCN pulls the centers
//! of semantically related classes together, and FGSM/PGD examples smooth the
//! decision boundaries between overlapping classes.
//!
//! Modules, bottom-up:
//!
//! - [`corrgraph`]: class-correlation graph from class-definition embeddings.
//! - [`model`]: encoder, GCN refinement, cosine-sigmoid head, explicit backward.
//! - [`losses`]: cross-entropy, assume-negative BCE, focal, full-label BCE.
//! - [`adversarial`]: FGSM and PGD in embedding space.
//! - [`trainer`]: Adam, exponential decay, the training loop.
//! - [`data`]: JSON Lines datasets and the synthetic ambiguity generator.
//! - [`eval`]: top-k accuracy, average precision, macro MAP, co-label tables.
//! - [`config`]: flat `key=value` configuration files.

pub mod adversarial;
pub mod config;
pub mod corrgraph;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod trainer;
mod fsutil;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/correlation-graph.md")]
    mod correlation_graph {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/adversarial.md")]
    mod adversarial {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
