//! Neural-field reconstruction.
//!
//! The heat map is represented continuously as
//! `H(x, y) = sigmoid(MLP(encode(x, y)))`, where `encode` is a multiresolution
//! hash encoding of the point mapped into `[0,1]²`. The parameters are fitted
//! to a measured sinogram by pushing the field through the same arc-integral
//! forward model used by [`crate::mb`], with gradients obtained by a
//! hand-written reverse pass.

mod checkpoint;
mod encoding;
mod field;
mod loss;
mod train;

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive};

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use encoding::{encode, HashEncoding, HashEncodingConfig, Stencil, HASH_PRIMES};
pub use field::{FieldConfig, FieldDomain, NeuralField};
pub use loss::{loss_and_gradients, predict_signals, predict_signals_scaled, LossParts, TvPrior};
pub use train::{train, train_with, tv_grid_for, EpochRecord, TrainConfig, TrainResult};

/// Scalar type of a neural field: `f32` for training, `f64` for checks.
pub trait Real:
    Float + FromPrimitive + LinalgScalar + Send + Sync + std::fmt::Debug + Default
{
}

impl Real for f32 {}
impl Real for f64 {}
