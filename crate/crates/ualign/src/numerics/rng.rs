//! Seedable counter-based random generator with label-splittable streams.
//!
//! The generator hashes `(key, counter)` with the SplitMix64 finalizer, so a
//! stream is a pure function of its key and every derived stream is a pure
//! function of the parent key plus a label. Splitting never consumes parent
//! state, which makes module-level draws order-independent.
//!
//! All outputs are produced with integer arithmetic and exact float scaling
//! (no libm calls), so identical seeds give identical streams on every
//! platform. `normal` uses the Irwin-Hall 12-sum approximation for the same
//! reason.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Counter-based generator state.
#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng {
            key: mix(seed ^ 0x6A09_E667_F3BC_C908),
            counter: 0,
        }
    }

    /// Derive an independent stream named by `label`. Does not advance or
    /// depend on this stream's position.
    pub fn split(&self, label: &str) -> Rng {
        Rng {
            key: mix(self.key ^ fnv1a(label.as_bytes())),
            counter: 0,
        }
    }

    /// Derive an independent stream for an index (per-sample, per-epoch...).
    pub fn split_index(&self, index: u64) -> Rng {
        Rng {
            key: mix(self.key ^ mix(index.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    /// Stable identifier of this stream, usable as provenance.
    pub fn stream_id(&self) -> u64 {
        self.key
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` via widening multiply.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "Rng::below requires n > 0");
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Approximately standard normal (Irwin-Hall, 12 uniforms).
    pub fn normal(&mut self) -> f64 {
        let mut s = 0.0;
        for _ in 0..12 {
            s += self.next_f64();
        }
        s - 6.0
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
