//! Prior-guided attention U-Net for retinal OCT fluid segmentation.
//!
//! A variational autoencoder reconstructs a fluid-free version of each slice;
//! a small encoder-decoder turns that reconstruction into a four-level prior
//! pyramid, which a triple attention gate fuses with encoder and decoder
//! features at every decoder stage. Everything runs on the self-contained
//! autodiff substrate in [`diffcore`].

pub mod blocks;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod gate;
pub mod losses;
pub mod net;
pub mod nn;
pub mod priornet;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor4};
