//! Labelled seed derivation: every consumer of randomness receives its own
//! stream derived from one root seed and a path of labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    state: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree {
            state: splitmix(root),
        }
    }

    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree {
            state: splitmix(self.state ^ fnv1a(label.as_bytes())),
        }
    }

    pub fn index(&self, i: u64) -> SeedTree {
        SeedTree {
            state: splitmix(self.state.rotate_left(17) ^ splitmix(i)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.state
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.state)
    }
}
