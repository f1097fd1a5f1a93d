pub mod error;
pub mod io;
pub mod model;
pub mod normal;
pub mod oracle;
pub mod predictive;
pub mod prior;
pub mod quadrature;
pub mod smc;
pub mod synthetic;
pub mod topic;

pub use error::{Error, Result};
