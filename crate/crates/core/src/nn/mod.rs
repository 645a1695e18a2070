//! Minimal neural-network toolkit on top of candle tensors.

pub mod conv;
pub mod layers;
pub mod store;
pub mod tensors;

pub use conv::conv2d;
pub use layers::{BatchNorm2d, Conv2d, ConvSpec, Ctx, PadMode};
pub use store::{Init, VarPath, VarStore};
pub use tensors::ParameterStore;
