pub mod commands;
pub mod config;
pub mod error;
pub mod jobs;
pub mod pipeline;
pub mod service;

pub use error::CliError;
