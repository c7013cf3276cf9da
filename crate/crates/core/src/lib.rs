pub mod brownian;
pub mod commands;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod measure;
pub mod models;
pub mod rng;
pub mod taming;
