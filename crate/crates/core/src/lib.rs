//! Graph-based surrogate modeling of polycrystal hyperelasticity.
//!
//! The pipeline, end to end:
//! 1. [`microstructure`]: periodic voxel Voronoi polycrystals with sampled
//!    grain orientations.
//! 2. [`graph`]: grain-contact graphs and their descriptor matrices.
//! 3. [`fung`]: the orthotropic Fung energy driving per-grain response.
//! 4. [`homogenization`]: Taylor and FFT (Lippmann-Schwinger) volume
//!    averaging that labels deformation samples with energy and stress.
//! 5. [`nn`]: a hybrid graph-convolution + dense energy surrogate with exact
//!    forward/reverse derivatives, including second-order ones for
//!    derivative-supervised (Sobolev) training.
//! 6. [`training`]: Adam with plateau decay, K-fold protocols, metrics.
//! 7. [`verification`]: objectivity, anisotropy, convexity, and gradient
//!    checks on trained surrogates.
//! 8. [`phasefield`]: a tension/compression energy split and damage-evolution
//!    driver at a single material point.
//! 9. [`config`] and [`io`]: run configuration and artifact formats.

#![deny(unsafe_code)]

pub mod error;
pub mod fung;
pub mod graph;
pub mod homogenization;
pub mod io;
pub mod microstructure;
pub mod nn;
pub mod phasefield;
pub mod training;
pub mod verification;
pub mod rotation;
pub mod tensor;

pub use error::{Error, Result};
