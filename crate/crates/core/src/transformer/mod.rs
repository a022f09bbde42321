//! Encoder-decoder transformer with explicit forward caches and hand-written
//! backward passes.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod config;
mod layers;
mod model;
mod params;

pub use config::{ModelConfig, Preset};
pub use model::{Batch, EncoderOutput, LossGrad, LossStats, Transformer};
pub use params::{Attention, DecoderLayer, EncoderLayer, LayerNorm, Linear, Parameters};

use std::fmt::{Debug, Display};

/// Floating point element type of model tensors.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
