//! Spectral networks on graph-structured data.
//!
//! The pipeline estimates a similarity graph between input features
//! ([`graph`]), diagonalizes its normalized Laplacian ([`spectral`]), builds a
//! clustering hierarchy for pooling ([`clustering`]) and trains networks whose
//! convolutions are spline-smoothed spectral multipliers ([`nn`], [`train`]).

pub mod clustering;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod nn;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
