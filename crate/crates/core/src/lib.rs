#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod beamforming;
pub mod classification;
pub mod config;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fusion;
pub mod hash;
pub mod mbo;
pub mod music;
pub mod scene;

pub use error::{Error, Result};
