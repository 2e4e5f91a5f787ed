//! Robust QR-in-image steganography with invertible attention-coupling flows.

pub mod autodiff;
pub mod distortion;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod img;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod qr;
pub mod trainer;
pub mod transition;

pub use error::{Error, Result};
