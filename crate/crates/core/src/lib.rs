#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Semantic sentence-pair matching and dense retrieval.
//!
//! A small siamese encoder is pre-trained with unsupervised SimCSE,
//! fine-tuned with CoSENT (or a baseline objective), and scored by blending a
//! classifier softmax with a k-nearest-neighbor vote. The crate also carries
//! an exact cosine retrieval index, the evaluation metrics, an ablation
//! runner and a seeded oracle harness.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod eval;
pub mod knn;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod rundir;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
