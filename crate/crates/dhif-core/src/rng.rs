//! Deterministic pseudo-random source.
//!
//! Reproducibility is a hard requirement: the same seed must regenerate the
//! same datasets, the same weight initializations, and therefore the same
//! training trajectories. To make that hold across builds and platforms the
//! generator is pinned here rather than borrowed from a crate that might
//! change its stream between versions:
//!
//! * seeding: SplitMix64, one output per state word;
//! * stream: xoshiro256++;
//! * `uniform`: the top 53 bits of a draw, scaled by 2^-53, giving [0, 1);
//! * `normal_pair`: Box–Muller on two consecutive uniforms.
//!
//! The integer and uniform streams are bit-exact everywhere by construction.
//! The normal stream additionally goes through `ln`/`cos`/`sin`, so it is
//! bit-exact for a given platform's libm (in practice these functions agree
//! across mainstream platforms to the last bit for these inputs).

/// SplitMix64 stepper. Used to expand a single `u64` seed into generator
/// state and to derive independent per-scene seeds from a master seed.
#[derive(Debug, Clone, Copy)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Derive an independent stream seed from a master seed. Used wherever one
/// configured seed has to drive several unrelated random consumers (weight
/// init vs. batch shuffling, or the per-scene seeds of a dataset): stream
/// indices decorrelate through SplitMix64's output mixing.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut sm = SplitMix64::new(master ^ stream.wrapping_mul(0xA24B_AED4_963E_E407));
    sm.next_u64()
}

/// xoshiro256++ seeded through SplitMix64.
#[derive(Debug, Clone)]
pub struct SeededRng {
    s: [u64; 4],
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        let s = [sm.next_u64(), sm.next_u64(), sm.next_u64(), sm.next_u64()];
        SeededRng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform draw in [0, 1) with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be nonzero. The modulo bias is
    /// below 2^-50 for any `n` this crate uses (shuffles, small ranges).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is meaningless");
        (self.next_u64() % n as u64) as usize
    }

    /// Two independent standard normals from one Box–Muller transform.
    /// `1 - u1` keeps the logarithm argument in (0, 1], so the result is
    /// always finite.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// `n` uniforms in [0, 1).
    pub fn fill_uniform(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    /// `n` standard normals. Draws ⌈n/2⌉ Box–Muller pairs and drops the
    /// second half of the final pair when `n` is odd, so the stream position
    /// depends only on `n`.
    pub fn fill_normal(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let (a, b) = self.normal_pair();
            out.push(a);
            out.push(b);
        }
        out.truncate(n);
        out
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
