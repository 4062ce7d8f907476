//! Minimal differentiable tensor toolkit: dense tensors, a parameter store,
//! a reverse-mode tape and the handful of layers the segmentation network
//! needs.

pub mod kernels;
mod layers;
mod param;
mod tape;
mod tensor;

pub use layers::{BatchNorm2d, Conv2d, ConvSpec, Init, Initializer};
pub use param::{BufferId, ParamId, ParamRegistry, Parameter};
pub use tape::{Activation, InputGrads, Mode, OpEvent, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::{FeatureMap, Tensor};

#[cfg(test)]
mod tests;
