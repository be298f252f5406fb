//! Configuration, commands and report emission behind the `shapebias` binary.

pub mod commands;
pub mod config;
pub mod report;
pub mod svg;
