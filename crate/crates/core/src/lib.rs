pub mod body;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fitting;
pub mod geometry;
pub mod imageio;
pub mod losses;
pub mod observation;
pub mod optim;
pub mod par;
pub mod provenance;
pub mod prior;
pub mod probe;
pub mod regressor;
pub mod render;
pub mod scenes;
pub mod trainer;

pub use error::{Error, Result};
