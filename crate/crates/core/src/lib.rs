pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod evalkit;
pub mod metatrain;
pub mod nets;
pub mod optim;
pub mod privacy;
pub mod runner;
pub mod seeds;
pub mod synthdata;

pub use error::{Error, Result};
