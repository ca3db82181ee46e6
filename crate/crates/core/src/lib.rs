#![doc = include_str!("../../../README.md")]

pub mod arch;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod fed;
pub mod local;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
