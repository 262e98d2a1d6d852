pub mod ablation;
pub mod autodiff;
pub mod boundary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod fpm;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod nprm;
pub mod objective;
pub mod optim;
pub mod params;
pub mod patch;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
