//! Speech-representation purification laboratory.

pub mod audio;
pub mod corpus;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod frontend;
pub mod layers;
pub mod miest;
pub mod model;
pub mod objectives;
pub mod purification;
pub mod substrate;
pub mod training;

pub use error::{Error, Result};
