//! Surround-view depth estimation for a ring of six cameras.
//!
//! The crate contains a small reverse-mode tensor engine ([`tensor`]),
//! multi-view attention ([`attention`]), the encoder/decoder network
//! ([`model`]), training losses ([`losses`]), image augmentation, corruption
//! and test-time restoration ([`augment`]), a procedural multi-view dataset
//! ([`data`]) and the training/evaluation harness ([`train`]).
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! name the two instantiations.
//!
//! [`checks`] registers the finite-difference gradient checks and [`seed`]
//! derives independent sub-seeds, so every run is reproducible from its
//! configured seeds.

pub mod attention;
pub mod augment;
pub mod checks;
pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::{Gradients, Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type DinoSd64 = model::DinoSd<f64>;
pub type DinoSd32 = model::DinoSd<f32>;
