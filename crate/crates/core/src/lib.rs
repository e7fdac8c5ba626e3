#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod averaging;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod kolmogorov;
pub mod mdp_rate;
pub mod model;
pub mod occupation;
pub mod rare_event;
pub mod rng;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
