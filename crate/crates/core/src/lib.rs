//! Kernel Koopman surrogates of controlled dynamics with Nyström landmarks,
//! infinite-horizon LQR on the lifted model, and empirical checks of the
//! approximation rates.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod identify;
pub mod kernels;
pub mod lqr;
pub mod numerics;
pub mod simulate;
pub mod theory;

pub use error::{Error, Result};
