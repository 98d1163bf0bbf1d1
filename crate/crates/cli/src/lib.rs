//! Command-line front end: argument parsing, frame ingestion, artifact
//! directories and the commands themselves.

pub mod cli;
pub mod commands;
pub mod device;
pub mod error;
pub mod ingest;
pub mod manifest;
pub mod plot;

pub use cli::run;
pub use ingest::ingest_frames;
