//! A small fixed-layer-set 1-D neural network stack with exact reverse-mode
//! gradients. Everything is generic over [`Real`] so the same code runs in
//! single precision for training and double precision for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

mod adam;
pub mod gradcheck;
mod layer;
mod network;
pub mod ops;
mod tensor;

pub use adam::Adam;
pub use layer::{xavier_bound, xavier_uniform, LayerSpec, Padding, BN_EPS, BN_MOMENTUM};
pub use network::{infer_shapes, Gradients, Network};
pub use tensor::Tensor;

pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
