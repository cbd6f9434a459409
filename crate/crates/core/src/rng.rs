//! Deterministic, splittable random number generation.
//!
//! Every random draw in this crate (weight init, dropout masks, shuffling,
//! synthetic data) comes from the counter-based generator defined here, so a
//! run is reproducible from a single `u64` seed on any platform, and another
//! implementation in any language can regenerate identical streams from this
//! description:
//!
//! * State advance (SplitMix64): `state = state.wrapping_add(0x9E3779B97F4A7C15)`,
//!   then the output is `mix64(state)` where
//!   `mix64(z) = { z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//!   z *= 0x94D049BB133111EB; z ^ (z >> 31) }` (wrapping multiplies).
//! * `uniform()` maps the top 53 bits to `[0, 1)`: `(next_u64() >> 11) * 2^-53`.
//! * `normal()` draws two fresh uniforms `u1, u2` (in that order) and returns
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` (Box-Muller, no caching of the sine
//!   branch).
//! * `below(n)` uses the widening-multiply reduction
//!   `((next_u64() as u128 * n as u128) >> 64) as usize`.
//! * `split(label)` derives an independent child stream from the generator's
//!   *original* seed, not its current state:
//!   `child_seed = mix64(seed ^ fnv1a64(label_utf8_bytes))`. Splitting is
//!   therefore insensitive to how many values the parent has already drawn.
//!
//! FNV-1a (64-bit): `h = 0xcbf29ce484222325`, then for each byte
//! `h = (h ^ byte).wrapping_mul(0x100000001b3)`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seedable, splittable PRNG. See the module docs for the exact stream spec.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, state: seed }
    }

    /// The seed this stream was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle driven by `below`.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Independent child stream identified by `label` (see module docs).
    pub fn split(&self, label: &str) -> Rng {
        Rng::new(mix64(self.seed ^ fnv1a64(label.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_ignores_parent_position() {
        let parent = Rng::new(7);
        let mut advanced = Rng::new(7);
        for _ in 0..10 {
            advanced.next_u64();
        }
        let mut c1 = parent.split("dropout");
        let mut c2 = advanced.split("dropout");
        assert_eq!(c1.next_u64(), c2.next_u64());

        let mut other = parent.split("shuffle");
        assert_ne!(c1.next_u64(), other.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(1);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut rng = Rng::new(3);
        let mut seen = [false; 7];
        for _ in 0..1_000 {
            seen[rng.below(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = Rng::new(11);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
