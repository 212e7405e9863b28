//! Snapshot spectral imaging laboratory: a differentiable CASSI forward
//! model, a reversible-prior multi-stage reconstructor built on a
//! spectral-spatial transformer, and the training and evaluation tooling
//! around them.

pub mod autodiff;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optics;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use optics::{CodedMask, DispersionConfig, Measurement, NoiseModel, SpectralCube};
pub use optics::forward_project;
pub use tensor::{Real, Tensor};
