//! Deformable 3D image registration built from a frozen slice-wise 2D feature
//! encoder, channel regularization, and a coarse-to-fine residual deformation
//! pyramid.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume`] holds the core value types and the deformation-field algebra.
//! * [`encoder`] turns a volume into a dense multi-channel feature volume.
//! * [`channel_reg`] reduces encoder channels by random subsets or PCA.
//! * [`head`] predicts and composes residual fields over a feature pyramid.
//! * [`losses`] and [`metrics`] score registrations for training and evaluation.
//! * [`synth`] generates seeded phantoms and ground-truth deformations.
//! * [`training`] runs the optimisation loop, checkpoints and evaluation.
//! * [`cli`] binds everything into the `fmir` command.

pub mod channel_reg;
pub mod cli;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod head;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod training;
pub mod volume;

mod interp;
pub mod seed;

pub use error::{FmirError, Result};
pub use volume::{DeformationField, Interpolation, Segmentation, Shape3, Volume};
