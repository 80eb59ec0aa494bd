pub mod attention;
pub mod backbone;
pub mod bbox;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod head;
pub mod model;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Rng, Tensor};
