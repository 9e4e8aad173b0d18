pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dump;
pub mod error;
pub mod selftest;
