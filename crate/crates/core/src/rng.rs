// SPDX-License-Identifier: Apache-2.0

//! Counter-based random streams.
//!
//! Every stochastic quantity is drawn from a ChaCha8 stream keyed by
//! `(seed, module, index)`, so results do not depend on thread count or on
//! the order in which indices are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the module name, folded into the 64-bit seed.
fn module_key(module: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in module.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, module: &str, index: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ module_key(module));
    let mut bytes = [0u8; 32];
    for (k, chunk) in bytes.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(key.wrapping_add(k as u64)).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(bytes);
    rng.set_stream(index);
    rng
}
