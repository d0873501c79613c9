//! Deterministic RNG used everywhere in the lab.
//!
//! xorshift64* with a splitmix64 seeder. Not cryptographic; chosen for stable,
//! platform-independent output so that seeded runs replay bit-exactly.

/// splitmix64 finalizer, also used to derive substream seeds.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a label string, for naming RNG substreams.
pub fn hash_label(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a child seed from (seed, index), e.g. one seed per episode.
#[inline]
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index))
}

/// Derive a named substream seed from (seed, label).
#[inline]
pub fn derive_stream(seed: u64, label: &str) -> u64 {
    mix64(seed ^ hash_label(label))
}

/// Deterministic RNG with a single 64-bit state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimRng {
    state: u64,
}

impl SimRng {
    /// A zero seed is remapped through splitmix to avoid the xorshift
    /// lockup state.
    pub fn new(seed: u64) -> Self {
        let s = mix64(seed);
        Self {
            state: if s == 0 { 0x9E37_79B9_7F4A_7C15 } else { s },
        }
    }

    /// Substream seeded from (seed, label), independent of draw order on
    /// the parent.
    pub fn stream(seed: u64, label: &str) -> Self {
        Self::new(derive_stream(seed, label))
    }

    /// Raw state, used to key counter-based noise.
    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n) via multiply-shift on the high bits.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform integer in [lo, hi] inclusive.
    #[inline]
    pub fn int_in(&mut self, lo: u32, hi: u32) -> u32 {
        debug_assert!(lo <= hi);
        lo + self.index((hi - lo + 1) as usize) as u32
    }

    /// Bernoulli draw.
    #[inline]
    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform sign in {-1, +1}.
    #[inline]
    pub fn sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Standard normal via Box-Muller (two draws per value, no caching).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Counter-based standard normal: a pure function of (key, counter).
///
/// Rendering uses this for per-cell observation noise so that rendering is a
/// pure function of the world state's weather substream.
pub fn keyed_normal(key: u64, counter: u64) -> f64 {
    let a = mix64(key ^ mix64(counter.wrapping_mul(2)));
    let b = mix64(key ^ mix64(counter.wrapping_mul(2) + 1));
    let u1 = ((a >> 11) as f64 * (1.0 / (1u64 << 53) as f64)).max(f64::MIN_POSITIVE);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SimRng::new(7);
        let mut b = SimRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_independent_of_parent_draws() {
        let s1 = SimRng::stream(42, "npc");
        let s2 = SimRng::stream(42, "npc");
        assert_eq!(s1, s2);
        assert_ne!(SimRng::stream(42, "npc"), SimRng::stream(42, "pedestrian"));
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = SimRng::new(1);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut r = SimRng::new(3);
        let n = 50_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = r.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn keyed_normal_is_pure() {
        assert_eq!(keyed_normal(99, 5).to_bits(), keyed_normal(99, 5).to_bits());
        assert_ne!(keyed_normal(99, 5).to_bits(), keyed_normal(99, 6).to_bits());
    }
}
