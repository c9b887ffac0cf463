//! Counter-based, splittable random streams.
//!
//! A [`RngKey`] is a 64-bit key derived from a root seed by mixing in a path
//! of labels and counters. Each key yields an independent ChaCha stream, so
//! the numbers drawn for "batch 17 of phase A" do not depend on what else
//! was drawn before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngKey(u64);

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey(splitmix64(seed))
    }

    pub fn child(self, counter: u64) -> Self {
        RngKey(splitmix64(
            self.0 ^ splitmix64(counter.wrapping_add(0x632B_E59B_D9B4_E019)),
        ))
    }

    pub fn child_str(self, label: &str) -> Self {
        self.child(fnv1a(label))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
