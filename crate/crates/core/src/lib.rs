//! Simulation of fully connected networks on memristor crossbars, with
//! device non-idealities and ensemble-averaging committees.

pub mod committee;
pub mod error;
pub mod harness;
pub mod mapping;
pub mod matrix;
pub mod mnist;
pub mod net;
pub mod nonideal;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
pub use matrix::Matrix;
