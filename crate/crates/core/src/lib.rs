//! Selective state-space image quality assessment.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense tensors and a tape-based reverse-mode engine.
//! - [`ssm`]: zero-order-hold discretization and the selective scan.
//! - [`scan2d`]: 2D→1D traversal orders (cross and local-window).
//! - [`model`]: the multi-stage network, its blocks and the regression head.
//! - [`styleprompt`]: prompt generation/injection adapters and freezing.
//! - [`data`], [`metrics`], [`train`]: datasets, PLCC/SRCC, optimisation.
//! - [`config`], [`checkpoint`]: the on-disk formats.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scan2d;
pub mod ssm;
pub mod styleprompt;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
