pub mod autograd;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub(crate) mod io;
pub mod metrics;
pub mod optim;
pub mod perturb;
pub mod sae;
pub mod steering;
pub mod store;
pub mod transformer;

pub use error::{Error, Result};
