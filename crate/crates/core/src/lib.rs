//! Sinkhorn gradient flows for generative modeling.
//!
//! Particles are pushed along the Wasserstein gradient flow of the Sinkhorn
//! divergence towards a target sample, the empirical velocities are recorded
//! into a trajectory pool, and a small MLP is regressed onto them. New points
//! are generated by Euler integration of the learned field, optionally
//! followed by a straight-flow refinement phase (the two-phase sampler).
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`ot`] | log-domain Sinkhorn potentials, divergence, potential gradients |
//! | [`flow`] | empirical velocity, Euler stepping, trajectory pools |
//! | [`nn`] | dense nets with hand-written backprop, Adam, the three trainers |
//! | [`sampler`] | plain and two-phase Euler samplers with NFE accounting |
//! | [`data`] | 2D benchmark generators |
//! | [`eval`] | exact 2-Wasserstein distance via linear assignment |
//!
//! With the default `parallel` feature, independent batches, seeds and
//! samples are processed on the rayon pool. Results never depend on the
//! execution order; see [`exec`].

pub mod cloud;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod flow;
pub mod nn;
pub mod ot;
pub mod sampler;

pub use cloud::PointCloud;
pub use error::{Error, Result};
