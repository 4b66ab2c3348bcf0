pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod io_util;
pub mod model;
pub mod protocols;
pub mod trainer;

pub use error::{Error, Result};
