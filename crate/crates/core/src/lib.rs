//! Copula-based finite mixture models for clustering continuous, discrete
//! and mixed-domain data.

pub mod copulas;
pub mod datakit;
pub mod error;
pub mod eval;
pub mod gausquad;
pub mod init;
pub mod marginals;
pub mod mixture;
pub mod optimize;
pub mod special;
pub mod spec;

pub use error::{Error, Result};
