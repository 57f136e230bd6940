//! Bidirectional adversarial synthesis of geometrically matched two-domain
//! image pairs (membrane-like domain A, nuclei-like domain B), together with
//! the Geometric Matching Index used to evaluate them and a procedural
//! generator of ground-truth pairs.

pub mod checkpoint;
pub mod config;
pub mod data_synthesis;
pub mod dataset;
pub mod error;
pub mod gmi;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod networks;
pub mod parallel;
pub mod preprocessing;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
