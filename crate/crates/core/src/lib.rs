//! Shared multi-sequence time-series segmentation.
//!
//! A set of 1-D sequences is partitioned into stationary segments, each
//! explained by one kernel from a shared pool of squared-exponential
//! Gaussian-process covariances. Splits are treated as random variables and
//! sampled with a Gibbs chain per sequence; cluster assignments and mixing
//! weights get closed-form variational updates; kernel parameters and the
//! shared noise variance are point-estimated by gradient ascent on the
//! evidence lower bound.
//!
//! The crate is organized around that loop:
//!
//! - [`model`]: domain types, the exponential segment-length prior, dataset
//!   validation.
//! - [`kernel`]: SE covariance construction, per-segment marginal
//!   log-likelihood and its gradients, log-normal parameter priors.
//! - [`gibbs`]: the split sampler and an exact enumeration oracle for short
//!   sequences.
//! - [`vem`]: responsibilities, Dirichlet updates, ELBO, and the MAP M step.
//! - [`trainer`]: the outer loop, diagnostics, and segmentation of new data.
//! - [`generator`]: synthetic datasets drawn from the generative model.
//! - [`features`]: per-sequence cluster strings and frequency vectors.
//! - [`io`]: file schemas (datasets, checkpoints, reports, features CSV).
//! - [`plot`]: SVG rendering of traces with split marginals.

pub mod error;
pub mod features;
pub mod generator;
pub mod gibbs;
pub mod io;
pub mod kernel;
pub mod math;
pub mod model;
pub mod plot;
pub mod trainer;
pub mod vem;

pub use error::{Error, Result};
pub use model::{Dataset, Hyperparams, KernelParams, ModelState, Segmentation, Sequence};
