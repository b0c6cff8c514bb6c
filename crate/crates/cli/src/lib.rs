//! Command line and HTTP service for the few-shot detector.

pub mod cli;
pub mod service;
pub mod session;

pub use cli::run;
