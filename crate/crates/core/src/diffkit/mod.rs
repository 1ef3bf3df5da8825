//! Small reverse-mode autodiff kernel and the neural pieces the forecaster
//! is built from.

pub mod adam;
pub mod checkpoint;
mod graph;
mod kernels;
pub mod nn;
pub mod ode;
pub mod tensor;

pub use adam::{adam_step, Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use nn::{Dense, GruCell, GruVars, Mlp, MlpVars};
pub use ode::rk4_integrate;
pub use tensor::{Parameterized, Tensor};
