//! Dialogue response generation grounded in an enhanced concept graph.
//!
//! The pipeline mines new nodes and `DialogFlowTo` edges from a dialog corpus,
//! retrieves a hop-bounded subgraph per post, encodes it with an edge-aware
//! transformer and decodes with a GRU whose output mixes vocabulary generation
//! with copying subgraph concepts.

pub mod aligner;
pub mod corpus;
pub mod edgeformer;
pub mod evalsuite;
mod error;
pub mod fsutil;
pub mod genmodel;
pub mod kgraph;
pub mod numcore;
pub mod subgraph;
pub mod trainer;

pub use error::{Error, Result};
