//! Pipeline orchestration for the `sidbias` command-line tool.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::{RunConfig, TokenizerKind};
pub use manifest::Manifest;
