//! Dense attribute attention with compositional feature generation for
//! fine-grained zero-shot and few-shot classification on precomputed region
//! features.
//!
//! The pipeline has two training stages. The first learns attention, attribute
//! embedding and attribute grounding on seen classes ([`optim`]). The second
//! composes dense features for novel classes out of attribute features of seen
//! training images and fine-tunes the classifier on them ([`composer`] for the
//! zero-shot case, [`fewshot`] when a few novel images exist).

pub mod attention;
pub mod cli;
pub mod composer;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod numkernel;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
