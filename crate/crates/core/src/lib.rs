pub mod cli;
pub mod dataio;
pub mod diffcore;
pub mod embed;
pub mod error;
pub mod eval;
pub mod graphgen;
pub mod interactgnn;
pub mod metatrain;
pub mod orderoracle;

pub use error::{Error, Result};
