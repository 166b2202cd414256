//! Stream-oriented agent runtime with a declarative pipeline language,
//! a deterministic sandbox, similarity metrics and a generator loop.

pub mod eval;
pub mod generator;
pub mod harness;
pub mod model;
pub mod operator;
pub mod pipeline;
pub mod runtime;
pub mod sandbox;
pub mod types;
