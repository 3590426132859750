//! Convexification solver for the coefficient inverse problem of the
//! spatial SIR epidemic model.

pub mod config;
pub mod convexification;
pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod grid;
pub mod io;
pub mod linsolve;
pub mod masks;
pub mod observation;
pub mod optimizer;
pub mod pipeline;
pub mod recovery;
pub mod spline;

pub use error::{Error, Result};
