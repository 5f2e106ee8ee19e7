//! Select-attend-transfer (SAT) skip-connection gates and the miniature
//! segmentation networks built around them.
//!
//! The crate is `no_std` with `alloc`. It holds the numeric substrate (a
//! dense `f64` tensor and a reverse-mode tape), layer primitives, the gate
//! itself, U-Net / V-Net / Tiramisu style networks, training, metrics and a
//! synthetic data generator. File formats and the command-line tool live in
//! the companion `satskip` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{compensated_sum, finite_diff_grad, finite_diff_vjp, EwiseKind, GradError, Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use gate::{attend, channels_off, gate_forward, select, GateOutput, GateParams, GateVariant};
pub use networks::{build_model, concat_input_width, count_params, ArchSpec, Family, Model, ParamCount};
pub use nn::{BatchNormConfig, BatchNormState, ConvSpec};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{tensor_from, Layout, Tensor};
