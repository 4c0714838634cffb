//! Counter-based randomness keyed by `(seed, round, role)`.
//!
//! Each draw is addressed by its index inside a stream, so the device and
//! the edge reproduce the same uniform for the same purpose no matter which
//! of them consumes it, and no matter what was drawn before.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    DraftSample = 0,
    AcceptDraw = 1,
    ResampleDraw = 2,
    BonusDraw = 3,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    round: u32,
    role: Role,
    base: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, round: u32, role: Role) -> Self {
        let mut base = ChaCha8Rng::seed_from_u64(seed);
        base.set_stream(((round as u64) << 2) | role as u64);
        RngStream {
            seed,
            round,
            role,
            base,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// The `index`-th uniform of this stream, in `[0, 1)`.
    pub fn uniform(&self, index: u64) -> f64 {
        let mut rng = self.base.clone();
        // one f64 consumes two 32-bit words
        rng.set_word_pos(index as u128 * 2);
        rng.random::<f64>()
    }
}

/// The four role streams of one draft-verify round.
#[derive(Debug, Clone)]
pub struct RoundRng {
    pub draft: RngStream,
    pub accept: RngStream,
    pub resample: RngStream,
    pub bonus: RngStream,
}

impl RoundRng {
    pub fn new(seed: u64, round: u32) -> Self {
        RoundRng {
            draft: RngStream::new(seed, round, Role::DraftSample),
            accept: RngStream::new(seed, round, Role::AcceptDraw),
            resample: RngStream::new(seed, round, Role::ResampleDraw),
            bonus: RngStream::new(seed, round, Role::BonusDraw),
        }
    }
}
