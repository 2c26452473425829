//! File formats, run configuration and experiment drivers on top of
//! `maskgen-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod pipeline;
pub mod state;
pub mod streams;
