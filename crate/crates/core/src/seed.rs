//! Named random streams derived from one master seed.
//!
//! Every subsystem draws from its own stream, keyed by a name and a tuple of
//! integer ids (user, round, ...), so enabling one subsystem never shifts the
//! randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for `(master, name, ids)`.
pub fn stream_seed(master: u64, name: &str, ids: &[u64]) -> u64 {
    // FNV-1a over the name bytes, then splitmix over each component.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut s = splitmix64(master ^ splitmix64(h));
    for &id in ids {
        s = splitmix64(s ^ splitmix64(id.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    s
}

pub fn stream_rng(master: u64, name: &str, ids: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, name, ids))
}

/// Stream names used by the simulator.
pub mod streams {
    pub const DATA: &str = "data";
    pub const POPULATION: &str = "population";
    pub const MODEL_INIT: &str = "model-init";
    pub const EMBED_INIT: &str = "embed-init";
    pub const DP: &str = "dp";
    pub const SAMPLING: &str = "client-sampling";
    pub const SOM: &str = "som";
    pub const TRIPLET: &str = "triplet";
    pub const PROTOTYPES: &str = "prototypes";
    pub const FRESH_HEAD: &str = "fresh-head";
    pub const PACKET_ID: &str = "packet-id";
}
