//! Differentiable-computation substrate: matrices, the reverse-mode tape,
//! parameter storage, the layer set, Adam, checkpoints and gradient checking.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, Adam};
pub use checkpoint::Checkpoint;
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use graph::{Graph, Var};
pub use layers::{BatchNorm, Blstm, Conv1d, Linear, Mode};
pub use params::{xavier_init, Init, ParamStore};
pub use tensor::{Mat, Scalar};
