//! Volumetric anchor-free lesion detection at desk scale.
//!
//! The crate provides:
//!
//! - a minimal dense-tensor engine with reverse-mode differentiation
//!   ([`tensor`]), including 3-D convolution and trilinear sampling;
//! - pseudo-3D conversions of 2-D convolution weights ([`convert`]):
//!   slice-wise reshaping, I3D inflation, ST3D spatial/temporal splitting
//!   and ACS3D axial/coronal/sagittal channel partitioning;
//! - a detector ([`net`]) with a 2-D front-end, a pseudo-3D third dense
//!   block, FPN fusion, a center-heatmap head and a surface-point
//!   regression head;
//! - heatmap targets and losses ([`targets`], [`losses`]);
//! - peak decoding, 3D-IoU matching and FROC evaluation ([`eval`]);
//! - a deterministic synthetic volume generator ([`synth`]);
//! - training with Adam and plateau LR drops ([`train`]) and a
//!   finite-difference gradient checker ([`gradcheck`]).

pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod convert;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod net;
pub mod synth;
pub mod targets;
pub mod tensor;
pub mod train;

pub use boxes::{Box3D, GroundTruthBox};
pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
