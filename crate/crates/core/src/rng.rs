//! Named random substreams.
//!
//! Every draw in a run descends from one 64-bit seed. A substream is the
//! ChaCha8 keystream for that seed with its stream id set from a hash of
//! `(stage, chain, purpose)`, so adding a new consumer never perturbs the
//! draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn substream(seed: u64, stage: &str, chain: u64, purpose: &str) -> ChainRng {
    let mut h = 0xcbf2_9ce4_8422_2325;
    h = fnv1a(stage.as_bytes(), h);
    h = fnv1a(&[0xff], h);
    h = fnv1a(&chain.to_le_bytes(), h);
    h = fnv1a(purpose.as_bytes(), h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}
