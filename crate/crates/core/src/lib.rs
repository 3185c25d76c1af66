//! Scene flow estimation from 3D point clouds by global softmax matching.
//!
//! Given a source and a target cloud, the pipeline extracts per-point
//! features with a local-global-cross transformer (`tokenizer` + `gct`),
//! matches every source point against all target points through a
//! row-stochastic cross-similarity matrix, and smooths the resulting motion
//! field with a self-similarity matrix (`matcher`). Training (`training`),
//! metrics and the robust loss (`evaluation`), synthetic data and file
//! formats (`data_io`), and the underlying reverse-mode tape (`tape`) are
//! all desk-scale and fully deterministic given a seed.

pub mod checksum;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod gct;
pub mod geometry;
pub mod matcher;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use matrix::{Matrix, Scalar};
