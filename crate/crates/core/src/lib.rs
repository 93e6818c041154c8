pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod geodesic;
pub mod lagrangian;
pub mod measure;
pub mod metric_learn;
pub mod nlot;
pub mod nn;
pub mod spline;

pub use error::{Error, Result};
