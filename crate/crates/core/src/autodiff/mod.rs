//! Define-by-run reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns the gradients of all leaves created with `requires_grad`. Graphs
//! are rebuilt for every forward pass.
//!
//! Volumetric tensors use the 5-axis layout `batch × channels × depth ×
//! height × width`. Everything is generic over [`Real`] so gradient checks can
//! run in 64-bit while training runs in 32-bit.

mod adam;
mod checkpoint;
mod conv;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use checkpoint::{read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file, Checkpoint};
pub use conv::ConvGeometry;
pub use graph::{Gradients, Graph, Var, BCE_CLAMP};
pub use params::{BoundParams, ParamSet};
pub use tensor::{Real, Tensor};
