//! World-model agents for 2D object-positioning tasks.

pub mod behavior;
pub mod envsim;
pub mod harness;
pub mod worldmodel;
mod error;

pub use error::{Error, Result};
