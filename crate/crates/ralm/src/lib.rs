//! Command-line front end and file formats for the retrieval-augmented
//! decoder in `ralm-core`.
//!
//! Everything that touches the file system, the clock or the process lives
//! here: corpus ingestion and index files, checkpoints, datasets, the
//! benchmark harness with its CSV and SVG outputs, and the `ralm` binary.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod plot;
pub mod report;
