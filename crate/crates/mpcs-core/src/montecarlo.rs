//! Deterministic parallel Monte Carlo engine.
//!
//! Reproducibility contract: a run is determined by `(master seed, stream
//! index, draw count)` alone. Every sample index owns its own counter-based
//! substream, and accumulation uses a fixed pairwise summation tree, so the
//! result is bit-identical for any worker count.

use rand::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Identifies one random substream: master seed plus stream index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngSpec {
    pub seed: u64,
    pub stream: u64,
}

impl RngSpec {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derive a child spec; used to hand independent streams to sub-tasks.
    pub fn child(&self, offset: u64) -> Self {
        Self {
            seed: self.seed,
            stream: self
                .stream
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(offset)
                .wrapping_add(1),
        }
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::from_spec(*self)
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based generator: output `i` is a fixed function of
/// `(key, counter_start + i)`, so substreams never share state.
#[derive(Clone, Debug)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn from_spec(spec: RngSpec) -> Self {
        // Mix seed and stream through two splitmix rounds so that nearby
        // stream indices land on unrelated keys.
        let k1 = splitmix64(spec.seed);
        let key = splitmix64(k1 ^ spec.stream.wrapping_mul(0xd605_bbb5_8c8a_bc2d));
        Self { key, counter: 0 }
    }

    #[inline]
    pub fn next_u64_raw(&mut self) -> u64 {
        let out = splitmix64(self.key ^ self.counter.wrapping_mul(0xa24b_aed4_963e_e407));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform draw in `[0, 1)` with 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64_raw() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_u64_raw()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_u64_raw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

impl SeedableRng for StreamRng {
    type Seed = [u8; 16];

    fn from_seed(seed: Self::Seed) -> Self {
        let lo = u64::from_le_bytes(seed[..8].try_into().unwrap());
        let hi = u64::from_le_bytes(seed[8..].try_into().unwrap());
        Self::from_spec(RngSpec::new(lo, hi))
    }
}

/// Sums in a fixed binary tree independent of chunking or thread count.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// One Monte Carlo estimate with its standard error and optional verdict
/// against a target value.
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_used: usize,
    pub n_skipped: usize,
    pub target: Option<f64>,
    pub z: Option<f64>,
    pub pass: bool,
}

/// Default `|z|` threshold for pass/fail verdicts.
pub const Z_MAX_DEFAULT: f64 = 4.0;

impl McEstimate {
    fn from_values(values: &[f64], n_skipped: usize) -> Self {
        let n = values.len();
        let mean = pairwise_sum(values) / n as f64;
        let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let stderr = if n > 1 {
            (pairwise_sum(&sq) / ((n - 1) as f64 * n as f64)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            n_used: n,
            n_skipped,
            target: None,
            z: None,
            pass: true,
        }
    }

    /// Attach a target and judge `|z| <= z_max`. A zero standard error passes
    /// only on exact agreement.
    pub fn versus(mut self, target: f64, z_max: f64) -> Self {
        self.target = Some(target);
        if self.stderr > 0.0 {
            let z = (self.mean - target) / self.stderr;
            self.z = Some(z);
            self.pass = z.abs() <= z_max;
        } else {
            self.z = Some(0.0);
            self.pass = self.mean == target;
        }
        self
    }
}

/// Fraction of failed samples tolerated before the whole estimate errors.
const SKIP_LIMIT: f64 = 0.01;

fn finish(values: Vec<f64>, n: usize) -> Result<McEstimate> {
    let n_skipped = n - values.len();
    if (n_skipped as f64) > SKIP_LIMIT * n as f64 || values.len() < 2 {
        return Err(Error::TooManySkipped {
            skipped: n_skipped,
            total: n,
            limit: (SKIP_LIMIT * n as f64) as usize,
        });
    }
    Ok(McEstimate::from_values(&values, n_skipped))
}

/// Mean and standard error of `eval` over `n` independent substreams.
///
/// `eval` receives the substream for sample `i`; failures are skipped and
/// counted (more than 1% skipped is an error). The result does not depend on
/// `workers`.
pub fn estimate<F>(n: usize, spec: RngSpec, workers: usize, eval: F) -> Result<McEstimate>
where
    F: Fn(&mut StreamRng) -> Result<f64> + Sync,
{
    let raw = run_indexed(n, workers, |i| {
        let mut rng = RngSpec::new(spec.seed, spec.stream.wrapping_add(i as u64)).rng();
        eval(&mut rng)
    });
    let values: Vec<f64> = raw.into_iter().flatten().collect();
    finish(values, n)
}

/// Common-random-numbers difference estimator: estimates `E[f - g]` where
/// both functionals see the same sample.
pub fn paired_estimate<F>(n: usize, spec: RngSpec, workers: usize, eval: F) -> Result<McEstimate>
where
    F: Fn(&mut StreamRng) -> Result<(f64, f64)> + Sync,
{
    let raw = run_indexed(n, workers, |i| {
        let mut rng = RngSpec::new(spec.seed, spec.stream.wrapping_add(i as u64)).rng();
        eval(&mut rng).map(|(a, b)| a - b)
    });
    let values: Vec<f64> = raw.into_iter().flatten().collect();
    finish(values, n)
}

/// Runs `eval(i)` for `i in 0..n`, preserving index order in the output.
pub fn run_indexed<F>(n: usize, workers: usize, eval: F) -> Vec<Option<f64>>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    if workers <= 1 {
        (0..n).map(|i| eval(i).ok()).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(|| (0..n).into_par_iter().map(|i| eval(i).ok()).collect())
    }
}
