pub mod adaptive;
pub mod calibration;
pub mod device;
pub mod error;
pub mod estimation_theory;
pub mod linear_optics;
pub mod optimize;
pub mod smc;

pub use error::{Error, Result};
