//! Lens data, X-ray transforms and trapped-set statistics on Riemannian
//! surfaces with strictly convex boundary.

pub mod error;
pub mod flow;
pub mod geometry;
pub mod interp;
pub mod lens;
pub mod ode;
mod sparse;
pub mod tensors;
pub mod trapped;
pub mod xray;

pub use error::{LensError, Result};
