//! Command-line driver and annotation service for the listener pipeline.

pub mod commands;
pub mod service;
