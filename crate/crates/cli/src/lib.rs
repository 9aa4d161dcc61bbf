//! Configuration-driven front end for the sit-to-stand synthesis pipeline.

pub mod config;
pub mod pipeline;
pub mod plot;
