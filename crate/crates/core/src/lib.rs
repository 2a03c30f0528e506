pub mod bvp;
pub mod config;
pub mod continuation;
pub mod excitation;
pub mod model;
pub mod postprocess;
pub mod problem;
pub mod runner;
