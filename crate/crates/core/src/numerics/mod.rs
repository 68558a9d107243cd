//! Dense arrays, a reverse-mode tape, Adam, and a finite-difference checker.

mod array;
pub mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod scalar;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Tape, Var, LAYER_NORM_EPS, PROB_CLAMP};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random sub-streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Sampling = 3,
    Data = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Dropout rate paired with the generator that draws its masks.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: stream_rng(seed, Stream::Dropout),
        }
    }
}
