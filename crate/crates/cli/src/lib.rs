pub mod artifact;
pub mod config;
pub mod operators;
pub mod run;
