pub mod ablation;
pub mod autodiff;
pub mod batch;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod gradsuite;
pub mod hrffm;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod rdp;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
