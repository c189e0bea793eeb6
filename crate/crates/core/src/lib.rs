pub mod attention;
pub mod cli;
pub mod data;
pub mod encoding;
pub mod error;
pub mod graph;
pub mod layers;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
