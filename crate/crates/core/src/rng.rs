//! Seeded pseudo-random numbers.
//!
//! The generator is xoshiro256** (a member of the xorshift family) seeded
//! through SplitMix64, written out here so that streams are bit-identical on
//! every platform and across implementations:
//!
//! ```text
//! seeding (SplitMix64, run four times to fill s[0..4]):
//!     x  = x + 0x9E3779B97F4A7C15
//!     z  = x
//!     z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!     z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!     out = z ^ (z >> 31)
//!
//! next (xoshiro256**):
//!     result = rotl(s[1] * 5, 7) * 9
//!     t      = s[1] << 17
//!     s[2] ^= s[0];  s[3] ^= s[1];  s[1] ^= s[2];  s[0] ^= s[3]
//!     s[2] ^= t;     s[3]  = rotl(s[3], 45)
//! ```
//!
//! All arithmetic is wrapping 64-bit. Derived quantities:
//!
//! * `next_f64`: `(next >> 11) * 2^-53`, uniform on `[0, 1)`.
//! * `below(n)`: rejection sampling, discard draws `< (2^64 - n) mod n`, then
//!   `draw mod n`.
//! * `normal`: Box-Muller, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` with two fresh
//!   uniforms per call (the sine branch is discarded).
//! * `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.
//!
//! Independent streams for different purposes are derived by seed splitting:
//! `Rng::derive(seed, tag)` seeds with `seed ^ fnv1a64(tag)`.

use crate::fnv::fnv1a64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let s = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Rng { s }
    }

    /// Stream for a named purpose, independent of other purposes under the
    /// same seed.
    pub fn derive(seed: u64, purpose: &str) -> Self {
        Rng::new(derive_seed(seed, purpose))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return (r % n) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Uniform label in `0..k` different from `excluded`.
    pub fn other_label(&mut self, k: usize, excluded: usize) -> usize {
        debug_assert!(k >= 2 && excluded < k);
        let draw = self.below(k - 1);
        if draw >= excluded {
            draw + 1
        } else {
            draw
        }
    }
}

pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    seed ^ fnv1a64(purpose.as_bytes())
}
