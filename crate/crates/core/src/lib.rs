//! Prediction-based anomaly detection for multivariate sensor streams.
//!
//! The pipeline slides fixed-width windows over a normalized series, runs each
//! window through multi-scale temporal convolution, attends over a learned
//! Top-K sensor graph, pools node activations through sublevel-set persistence
//! on that graph, and predicts the next reading per sensor. Deviations between
//! prediction and observation, robustly rescaled per sensor, become anomaly
//! scores; the detection threshold is the maximum score seen on clean
//! validation data.
//!
//! Everything is f64 and single-threaded on purpose: given a seed, training
//! and detection produce byte-identical artifacts across runs.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod rng;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod topology;
pub mod train;
pub mod vectorize;

pub use error::{Error, Result};
