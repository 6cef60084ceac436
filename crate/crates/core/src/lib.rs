//! Infer fine-grained daily bike demand patterns in a city with no ride
//! history by transferring from a city that has one.
//!
//! The pipeline: rasterize both cities into uniform grids ([`grid`]), extract
//! geographic features per cell ([`features`]), project both cities into a
//! shared latent space with a joint PCA ([`copca`]), mine stable daily demand
//! patterns from the source city's trip records via a wavelet low-pass filter
//! ([`dwt`]), then train an attention-based multi-scale local CNN ([`model`])
//! that maps latent feature neighborhoods to patterns and apply it to the
//! target city. [`baselines`] has ridge-regression and KNN reference methods,
//! [`synth`] generates seeded synthetic cities with known ground truth, and
//! [`io`] reads/writes every on-disk format.

pub mod baselines;
pub mod copca;
pub mod dwt;
pub mod error;
pub mod features;
pub mod grid;
pub mod io;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
