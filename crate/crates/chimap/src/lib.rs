//! Quantitative MRI parameter mapping under a noncentral-chi noise model.
//!
//! Multi-coil magnitude images carry noncentral-chi (nc-χ) distributed noise
//! rather than Gaussian noise; the background (air) follows the central chi
//! special case. This crate estimates the noise parameters (ν, σ²) from image
//! intensities with an EM chi-mixture fit, then recovers quantitative maps
//! (PD, R1, R2*, MTsat) from multi-echo FLASH acquisitions by voxel-wise
//! Newton optimisation of the nc-χ (or Gaussian baseline) likelihood.
//!
//! Main entry points:
//! - [`noise_em::fit_noise`] — background noise estimation from intensities.
//! - [`fit::fit_maps`] — parameter map estimation from co-registered volumes.
//! - [`xval::loeo`] — leave-one-echo-out model comparison by predicted MSE.
//! - [`synth::simulate_acquisition`] — phantom + noise simulation.
//! - [`nifti`] — NIfTI-1 volume and JSON sidecar I/O.
//!
//! With the default `parallel` feature the voxel and sample loops run on
//! rayon; without it everything falls back to equivalent sequential loops.
//! Results are identical either way (see [`par`]).

pub mod dist;
pub mod error;
pub mod fit;
pub mod forward;
pub mod nifti;
pub mod noise_em;
pub mod par;
pub mod special;
pub mod synth;
pub mod volume;
pub mod xval;

pub use dist::{Family, NoiseModel};
pub use error::{Error, Result};
pub use fit::{FitProblem, ParameterMaps, SolverSettings};
pub use forward::{AcquisitionSettings, VoxelParams};
pub use noise_em::{EmConfig, MixtureState, NoiseFit};
pub use synth::PhantomSpec;
pub use volume::EchoVolume;
