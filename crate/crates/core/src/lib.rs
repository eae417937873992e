//! Box regression heads for one-stream visual tracking, built on a small
//! dependency-free f64 tensor engine.
//!
//! The crate provides the plain, Inception and deformable-Inception head
//! bodies, the score-map decoder, losses and AdamW training, tracking
//! metrics, a synthetic tracking dataset with a frozen toy encoder, and the
//! `boxhead` command-line driver.

pub mod bbox;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod container;
pub mod data;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
