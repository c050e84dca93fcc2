pub mod cart;
pub mod dataset;
pub mod eigen;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod runconfig;
pub mod spline;
pub mod svg;
pub mod sysmodel;

pub use error::{Error, Result};
