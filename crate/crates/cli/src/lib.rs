//! Command-line and HTTP front ends over the classifier core.

pub mod commands;
pub mod service;

pub use commands::run;
