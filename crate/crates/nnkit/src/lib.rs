//! Minimal neural toolkit: dense tensors, a reverse-mode tape, per-edge graph
//! convolution, residual blocks, a bidirectional gated recurrent layer and
//! the Adam optimizer.
//!
//! Everything runs on `f64` on a single thread. A network instance owns its
//! [`ParamStore`]; a [`Tape`] borrows the store for one forward/backward pass.

pub mod error;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use layers::{graph_conv_forward, leaky_relu, BiGru, GraphConv, GruCell, Linear, ResidualBlock, LEAKY_SLOPE};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Grads, ParamFile, ParamId, ParamStore};
pub use tape::{ConvTopology, Tape, Var};
pub use tensor::Tensor;

/// Deterministic generator used for parameter initialization.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
