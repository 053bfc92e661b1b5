//! Counter-based random number generation.
//!
//! Every random draw in the simulator comes from a [`StreamRng`]: a SplitMix64
//! finalizer applied to `key + counter * 0x9E3779B97F4A7C15` (wrapping), with the
//! counter starting at 1 and incremented before each draw. Substreams are derived
//! by hashing the parent key with a tag, so client `c` of a run seeded with `s`
//! always sees the same sequence regardless of how other clients consume theirs.
//!
//! Derived quantities use fixed, portable recipes:
//!
//! * `uniform()`: the top 53 bits of a draw scaled by 2^-53, in `[0, 1)`.
//! * `normal()`: Box-Muller, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`, two draws per value.
//! * `below(n)`: Lemire's multiply-high with rejection of the biased low zone.
//! * `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Well-known substream tags.
pub mod tags {
    pub const DATASET: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const CLIENT_SIZES: u64 = 3;
    pub const STREAM: u64 = 4;
    pub const SERVER: u64 = 5;
    pub const CLIENT: u64 = 6;
    pub const MODEL_INIT: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const PROBE: u64 = 9;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed),
            counter: 0,
        }
    }

    /// Independent child stream identified by `tag`. Does not advance `self`.
    pub fn substream(&self, tag: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(tag.wrapping_add(GOLDEN_GAMMA))),
            counter: 0,
        }
    }

    /// Shorthand for `substream(a).substream(b)`.
    pub fn substream2(&self, a: u64, b: u64) -> Self {
        self.substream(a).substream(b)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(
            self.key
                .wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_with(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.normal()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order (partial Fisher-Yates from the front).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
