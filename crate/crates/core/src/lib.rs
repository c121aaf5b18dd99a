pub mod bench;
pub mod cli;
pub mod error;
pub mod hedge;
pub mod market;
pub mod mc;
pub mod models;
pub mod net;
pub mod optim;
pub mod pde;
pub mod sgd;

pub use error::{Error, Result};
