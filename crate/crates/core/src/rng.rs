//! Per-sample random streams.
//!
//! Every Monte Carlo sample draws from its own ChaCha stream keyed by the
//! master seed and selected by `(role, sample_index)`. ChaCha is counter-based,
//! so a sample's draws do not depend on which worker runs it or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Which family of draws a stream feeds. Distinct roles never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    /// The primary Brownian path of a sample.
    Path = 0,
    /// A second, independent path (used only by the uncoupled weak estimator).
    Independent = 1,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, role: StreamRole, sample_index: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(master_seed);
        inner.set_stream(((role as u64) << 56) | (sample_index & ((1 << 56) - 1)));
        Self { inner }
    }

    /// The primary stream for sample `index`.
    pub fn for_sample(master_seed: u64, index: u64) -> Self {
        Self::new(master_seed, StreamRole::Path, index)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.standard_normal();
        }
    }
}
