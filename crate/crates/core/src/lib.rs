pub mod attribution;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod par;
pub mod tuning;

pub use error::{Error, Result};
