//! Counter-based random streams.
//!
//! Each stream is a keyed SplitMix64 sequence: output `i` is
//! `mix64(key + i * GAMMA)`, where the key is derived from the run seed and a
//! fixed per-stream salt. Any element can be computed directly from
//! `(key, i)`, which is what the sampled response logger relies on.

/// Weyl increment of SplitMix64.
const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Named streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Sample-index selection for queries.
    SampleSelection,
    /// Arrival-time generation.
    Arrivals,
    /// Compliance subsampling (which responses get logged).
    Compliance,
    /// Per-query randomness inside simulated SUTs.
    Simulation,
}

impl Stream {
    const fn salt(self) -> u64 {
        match self {
            Stream::SampleSelection => 0x5a4d_504c_5345_4c31,
            Stream::Arrivals => 0x4152_5249_5641_4c32,
            Stream::Compliance => 0x434f_4d50_4c49_4133,
            Stream::Simulation => 0x5349_4d55_4c41_5434,
        }
    }
}

/// SplitMix64 output function.
#[inline]
pub const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `index`-th derived run (alternate server runs and the like).
pub const fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(0x7275_6e5f_7365_6564)))
}

/// Maps 64 random bits onto `[0, 1)` with 53 bits of precision.
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self {
            key: Self::stream_key(seed, stream),
            counter: 0,
        }
    }

    pub const fn stream_key(seed: u64, stream: Stream) -> u64 {
        mix64(seed ^ stream.salt())
    }

    /// Element `counter` of the stream keyed by `key`, without advancing anything.
    #[inline]
    pub const fn at(key: u64, counter: u64) -> u64 {
        mix64(key.wrapping_add(counter.wrapping_mul(GAMMA)))
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = Self::at(self.key, self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Uniform integer in `[0, n)`; Lemire's multiply-shift with rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }
}
