//! Continuous-time policy evaluation from discrete-time data.

pub mod basis;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod fdcoeff;
pub mod galerkin;
pub mod io;
pub mod metrics;
pub mod modelfree;
pub mod quadrature;

pub use error::{Error, Result};
