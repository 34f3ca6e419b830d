pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;
pub mod world;
