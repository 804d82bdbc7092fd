//! Configuration, data ingestion and experiment orchestration.

pub mod config;
pub mod data;
pub mod experiment;
