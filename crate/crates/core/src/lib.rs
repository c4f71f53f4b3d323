pub mod error;
pub mod experiment;
pub mod geometry;
pub mod planner;
pub mod qp;
pub mod risk;
pub mod solver;
pub mod uncertainty;

pub use error::{Error, Result};
