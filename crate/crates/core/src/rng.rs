//! Counter-based random streams.
//!
//! Every random task derives its own generator from the run seed, a named
//! sub-stream, and task coordinates (respondent, simulation, ...), so results do
//! not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Fit = 2,
    Predict = 3,
    Consensus = 4,
    City = 5,
    Residents = 6,
    Responses = 7,
    Sample = 8,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, stream, coords...)`.
pub fn stream(seed: u64, which: Stream, coords: &[u64]) -> Rng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &c in std::iter::once(&(which as u64)).chain(coords) {
        state ^= c.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ acc;
        acc = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
