//! Minimal CPU neural-network layers with hand-written backward passes.
//!
//! Everything runs in `f64` so analytic gradients can be checked against
//! central finite differences. Per-sample work is parallelised, but every
//! reduction is summed in sample order, so results do not depend on the
//! thread count.

mod batchnorm;
mod checkpoint;
mod conv;
mod linear;
pub mod ops;
mod optim;
mod param;
mod resnet;

pub use batchnorm::{BatchNorm2d, BnCache};
pub use checkpoint::{read_checkpoint, sidecar_path, write_checkpoint, TensorMap};
pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use optim::{Sgd, StepSchedule};
pub use param::{Module, Param, ParamMut, ParamRef};
pub use resnet::{ConvBnRelu, ConvBnReluCache, ResidualBlock, Trunk, TrunkCache, TrunkConfig};
pub(crate) use param::join as join_name;
