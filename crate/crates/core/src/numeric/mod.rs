//! Dense `f64` tensors, reverse-mode differentiation, Adam and checkpoints.

pub mod checkpoint;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Meta};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Reduction, Tape, Var};
pub use tensor::Tensor;

/// Independent random stream keyed by `(seed, stream)`. Every source of
/// randomness in training (init, data order, dropout) draws from its own
/// stream of one run seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
