//! Counter-based random substreams.
//!
//! Every stochastic task draws from `substream(master, kind, index)`, a ChaCha8
//! generator keyed by the master seed with the stream word set from
//! `(kind, index)`. A task's numbers therefore depend only on its identity,
//! never on which worker ran it or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

pub type Stream = ChaCha8Rng;

/// What a substream is used for. The discriminant is part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// Environment paths feeding forward simulations.
    Environment = 1,
    /// Branching, immigration and sampling noise of one forward replica.
    Replica = 2,
    /// Environment paths used only by the backward (analytic) side.
    AnalyticEnvironment = 3,
    /// Brownian-bridge refinement of an existing environment path.
    Refinement = 4,
    /// Anything else (tests, ad-hoc sampling).
    Auxiliary = 5,
}

/// Identity of the substream that produced an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTag {
    pub master: u64,
    pub kind: StreamKind,
    pub index: u64,
}

impl SeedTag {
    pub fn new(master: u64, kind: StreamKind, index: u64) -> Self {
        Self { master, kind, index }
    }

    pub fn stream(&self) -> Stream {
        substream(self.master, self.kind, self.index)
    }
}

const INDEX_BITS: u32 = 48;

pub fn substream(master: u64, kind: StreamKind, index: u64) -> Stream {
    debug_assert!(index < (1 << INDEX_BITS));
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((kind as u64) << INDEX_BITS) | (index & ((1 << INDEX_BITS) - 1)));
    rng
}

#[inline]
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform on (0, 1], safe for `ln` and negative powers.
#[inline]
pub fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Poisson count with the given mean. Small means use sequential inversion
/// with a single uniform; large means defer to `rand_distr`.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < 20.0 {
        let u: f64 = rng.random();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u64;
        while u > cdf && k < 1000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        return k;
    }
    let dist = Poisson::new(mean).expect("finite positive mean");
    dist.sample(rng) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let mut s1 = substream(7, StreamKind::Replica, 3);
        let mut s2 = substream(7, StreamKind::Replica, 3);
        let mut s3 = substream(7, StreamKind::Replica, 4);
        let mut s4 = substream(7, StreamKind::Environment, 3);
        let x1: u64 = s1.random();
        assert_eq!(x1, s2.random::<u64>());
        assert_ne!(x1, s3.random::<u64>());
        assert_ne!(x1, s4.random::<u64>());
    }

    #[test]
    fn poisson_mean_and_variance() {
        for &mean in &[0.3, 4.0, 55.0] {
            let mut rng = substream(1, StreamKind::Auxiliary, 0);
            let n = 100_000;
            let draws: Vec<f64> = (0..n).map(|_| poisson(&mut rng, mean) as f64).collect();
            let m = draws.iter().sum::<f64>() / n as f64;
            let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (mean / n as f64).sqrt();
            assert!((m - mean).abs() < 4.0 * se, "mean {m} vs {mean}");
            assert!((v / mean - 1.0).abs() < 0.05, "variance {v} vs {mean}");
        }
        let mut rng = substream(1, StreamKind::Auxiliary, 1);
        assert_eq!(poisson(&mut rng, 0.0), 0);
    }
}
