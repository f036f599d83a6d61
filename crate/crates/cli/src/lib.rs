//! Command-line driver and HTTP service for the debias engine.

pub mod cli;
pub mod server;
pub mod views;
