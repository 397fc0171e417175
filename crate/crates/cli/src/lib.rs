//! Command-line driver and REST inference service for `kwsforge`.

pub mod app;
pub mod config;
pub mod service;

pub use app::run;
