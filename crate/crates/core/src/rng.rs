//! Seed derivation.
//!
//! Every random draw in the engine comes from a ChaCha stream keyed by the run
//! seed plus a short tag path (task, epoch, batch, ...). Nothing carries hidden
//! generator state between phases, so a run can be resumed from a checkpoint
//! and replay the exact same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags, so unrelated consumers never share a key.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    PrototypeInit = 2,
    CenterInit = 3,
    ProjectorInit = 4,
    Replay = 5,
    Exemplar = 6,
    Synth = 7,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn rng_for(seed: u64, stream: Stream, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, path))
}
