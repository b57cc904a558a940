//! Minimal dense-tensor network kernel: layers, evaluation and training
//! forward passes with full activation traces, and per-record
//! cross-entropy gradients.

pub mod arch;
pub mod backward;
pub mod forward;
pub mod model;
pub(crate) mod ops;

pub use arch::{Activation, ArchSpec, LayerSpec};
pub use backward::{backprop, backward, backward_trace, loss, loss_from_trace, probabilities, GradientSet, ParamGrad, Upstream};
pub use forward::{forward, DropoutMode, ForwardTrace};
pub use model::{Layer, Model, ParamKind, ParamLayer};

pub(crate) use forward::argmax;
pub(crate) use ops::softmax_in_place;
