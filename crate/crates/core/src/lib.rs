//! Physics-informed 3D point-source localization with a single-lobe rotating
//! point spread function.
//!
//! The crate covers the whole numerical pipeline: synthesizing the PSF
//! dictionary from the spiral-phase pupil ([`optics`]), the linear imaging
//! model and its noise channels ([`forward`]), synthetic scenes and datasets
//! ([`scene`]), the data-fidelity, sparsity and smoothed-MSE objectives
//! ([`losses`]), variational reconstruction ([`solvers`]), conversion of a
//! volume into a point list ([`postproc`]) and recall/precision scoring
//! ([`eval`]). File formats live in [`io`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod forward;
pub mod io;
pub mod losses;
pub mod numeric;
pub mod optics;
pub mod postproc;
pub mod scene;
pub mod solvers;

mod fft2;

pub use error::{Error, Result};
pub use forward::{
    add_noise, adjoint_apply, apply_forward, psf_column_norms, ForwardOperator, Image, ImageKind,
    ImageMeta, NoiseKind, NoiseModel, Sigma, Volume,
};
pub use optics::{build_dictionary, lobe_centroid_angle, render_psf_slice, spiral_phase, OpticalConfig, PsfDictionary};
