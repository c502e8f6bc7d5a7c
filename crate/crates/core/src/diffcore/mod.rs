//! Dense `f64` tensors, fixed-pipeline MLPs with hand-written reverse mode,
//! AdamW and cosine learning-rate scheduling.

mod gradcheck;
mod mlp;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, grad_check_subset, relative_error};
pub use mlp::{Activation, BatchNorm, ForwardCache, LayerParams, LayerSpec, Mlp, MlpSpec, Mode, ParamSet};
pub use optim::{adamw_step, cosine_lr, OptState};
pub use tensor::{l2_normalize, l2_normalize_backward, Normalized, Tensor};
