//! Deterministic pseudo-random numbers.
//!
//! Everything that draws randomness in this crate goes through [`Rng`], a
//! SplitMix64 generator. Streams are derived by mixing a global seed with a
//! stream index (or a name hash), so shard preprocessing and parameter
//! initialization are reproducible regardless of evaluation order or thread
//! count.

/// SplitMix64 generator. Small state, full 64-bit period, stable output
/// across platforms and releases.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix(z: u64) -> u64 {
    let mut z = z;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix two 64-bit values into one; used to derive independent streams
/// (e.g. `mix(global_seed, example_index)`).
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix(a.wrapping_add(GOLDEN).wrapping_mul(0x2545_f491_4f6c_dd1d) ^ splitmix(b))
}

/// FNV-1a hash of a string, for deriving per-tensor-name streams.
pub fn hash_name(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for byte in name.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn from_stream(seed: u64, stream: u64) -> Self {
        Rng::new(mix(seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        splitmix(self.state)
    }

    /// Uniform f64 in [0, 1), using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "Rng::below requires n > 0");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn below_usize(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = self.next_f64();
            if u > 0.0 {
                let v = self.next_f64();
                return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
            }
        }
    }

    /// Normal(0, std) truncated to ±2 standard deviations, by resampling.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// `k` distinct values drawn from [1, upper], returned sorted ascending.
    /// Floyd's algorithm; used for sampling compositions.
    pub fn distinct_sorted(&mut self, k: usize, upper: u64) -> Vec<u64> {
        assert!(k as u64 <= upper, "cannot draw {k} distinct values from 1..={upper}");
        let mut chosen = std::collections::BTreeSet::new();
        let start = upper - k as u64 + 1;
        for j in start..=upper {
            let t = 1 + self.below(j);
            if !chosen.insert(t) {
                chosen.insert(j);
            }
        }
        chosen.into_iter().collect()
    }
}
