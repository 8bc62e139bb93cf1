//! Numerical engine for block-spin renormalization of lattice QED on tiny tori.

pub mod averaging;
pub mod error;
pub mod fields;
pub mod flow;
pub mod grassmann;
pub mod lattice;
pub mod minimizer;
pub mod polymer;
pub mod regions;
pub mod report;
pub mod linalg;
pub mod oracle;

pub use error::{Error, Result};
