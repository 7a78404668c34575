pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod losses;
pub mod motion_embedding;
pub mod params;
pub mod pseudo_flow;
pub mod run;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
