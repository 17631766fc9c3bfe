pub mod adapter;
pub mod analysis;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod delta_file;
pub mod error;
pub mod io;
pub mod memory;
pub mod model;
pub mod optim;
pub mod sparta;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
