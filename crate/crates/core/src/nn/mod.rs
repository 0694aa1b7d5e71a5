//! Minimal neural-network toolkit over candle tensors.

pub mod depthwise;
pub mod gelu;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod store;

pub use layers::*;
pub use optim::{Adam, StepLr, WarmupCosine};
pub use store::{Init, VarStore};
