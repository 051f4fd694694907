pub mod analytic;
pub mod basis;
pub mod cdr;
pub mod cpi;
pub mod error;
pub mod io;
pub mod observables;
pub mod probe;
pub mod quadrature;
pub mod rng;
pub mod sde;
pub mod stepper;

pub use error::{Error, Result};
