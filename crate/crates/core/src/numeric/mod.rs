//! Dense tensors, reverse-mode differentiation, Adam, GRU cells and
//! reproducible random streams.

pub mod adam;
pub mod gru;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gru::{gru_cell, gru_step, GruVars, GruWeights};
pub use params::{Bound, ParamStore};
pub use rng::{normal, rng_normal, rng_stream, RngStream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
