pub mod backbone;
pub mod boxes;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod head;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod postprocess;
pub mod training;
pub mod transformer;

pub use config::Config;
pub use error::{Error, Result};
pub use model::{Model, Prediction};
