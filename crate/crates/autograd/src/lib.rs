//! Small reverse-mode automatic differentiation over dense tensors.
//!
//! Every backward rule is written in terms of other recorded ops, so a
//! gradient computed with `create_graph = true` is itself differentiable.
//! That is what a Wasserstein critic with gradient penalty needs: the
//! penalty depends on the input-gradient of the critic, and is then
//! differentiated again with respect to the critic's weights.
//!
//! The op set is deliberately closed under adjoints: convolution, its
//! input-gradient (transposed convolution) and its weight-gradient are
//! each other's adjoints; `broadcast_to`/`sum_to`, `crop`/`pad`,
//! `permute`/`permute` and sparse axis maps/their transposes pair up the
//! same way.

mod element;
mod graph;
pub mod ops;
mod optim;
mod tensor;

pub use element::Element;
pub use graph::{grad, is_grad_enabled, no_grad, Var};
pub use ops::conv::ConvGeom;
pub use ops::linmap::AxisMap;
pub use optim::{Adam, AdamConfig, AdamState};
pub use tensor::Tensor;
