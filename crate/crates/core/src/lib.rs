//! Embedded, single-node versioned store for record-oriented flat-file
//! releases: per-field delta storage with block compression, point-in-time
//! version generation, changed-only increment slices for downstream tools,
//! output merging with e-value correction, a generated-file cache, and a
//! provenance log.

pub mod catalog;
pub mod engine;
pub mod error;
pub mod genfile;
pub mod ingest;
pub mod merge;
pub mod model;
pub mod plugins;
pub mod store;
pub mod synth;

pub use engine::Engine;
pub use error::{Error, Result};
