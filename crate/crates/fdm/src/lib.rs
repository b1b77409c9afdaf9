//! Experiment tooling around `fdm-core`: configuration, corpora, file
//! formats, images and the command-line entry points.

pub mod config;
pub mod corpus;
pub mod formats;
pub mod experiment;
pub mod imaging;
pub mod checks;
pub mod commands;
