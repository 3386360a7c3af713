//! Counter-based random numbers: every draw is a pure function of
//! `(seed, stream, counter)`, so masks can be replayed in any order.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: splitmix64(seed),
        }
    }

    /// Independent child generator, keyed by `tag`.
    pub fn derive(self, tag: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn bits(self, stream: u64, counter: u64) -> u64 {
        splitmix64(splitmix64(self.key ^ splitmix64(stream)) ^ counter)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(self, stream: u64, counter: u64) -> f64 {
        (self.bits(stream, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Keep flags for inverted dropout: entry `i` is kept iff its draw is at
    /// least `rate`.
    pub fn keep_mask(self, stream: u64, n: usize, rate: f64) -> Vec<bool> {
        (0..n as u64)
            .map(|i| self.uniform(stream, i) >= rate)
            .collect()
    }
}
