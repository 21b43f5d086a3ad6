pub mod blocks;
pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod plane;
pub mod tensor;
pub mod training;

pub use error::{M2ganError, Result};
