pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod generate;
pub mod graph;
pub mod losses;
pub mod mask;
pub mod martt;
pub mod model;
pub mod nn;
pub mod pack;
pub mod ppm;
pub mod tensor;
pub mod tensorfile;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
