//! Knowledge-graph-driven automatic modulation classification.

pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod loss;
pub mod mkg;
pub mod msnet;
pub mod nn;
pub mod rgcn;
pub mod sigsyn;
pub mod trainer;

pub use error::{Error, Result};
