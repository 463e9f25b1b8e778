//! Monte Carlo estimates and order-stable accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Running sums over one block of samples. Blocks are merged in index
/// order, so totals do not depend on how blocks were scheduled.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(mut self, other: Moments) -> Self {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let m = self.sum / n;
        ((self.sum_sq - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn estimate(&self) -> Result<MCEstimate> {
        MCEstimate::new(self.mean(), (self.variance() / self.n as f64).sqrt(), self.n)
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n: u64,
    pub ci95: (f64, f64),
}

impl MCEstimate {
    pub fn new(value: f64, stderr: f64, n: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "an estimate needs at least 2 samples, got {n}"
            )));
        }
        if !(stderr >= 0.0) || !value.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid estimate {value} ± {stderr}")));
        }
        Ok(Self {
            value,
            stderr,
            n,
            ci95: (value - 1.96 * stderr, value + 1.96 * stderr),
        })
    }

    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        samples.iter().copied().collect::<Moments>().estimate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_estimate() {
        let e = MCEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(e.value, 2.5);
        let se = (5.0f64 / 3.0 / 4.0).sqrt();
        assert!((e.stderr - se).abs() < 1e-15);
        assert!((e.ci95.1 - e.value - 1.96 * se).abs() < 1e-15);
        assert!(MCEstimate::from_samples(&[1.0]).is_err());
    }

    #[test]
    fn merge_matches_single_pass() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let whole: Moments = xs.iter().copied().collect();
        let parts = xs
            .chunks(7)
            .map(|c| c.iter().copied().collect::<Moments>())
            .fold(Moments::default(), Moments::merge);
        assert_eq!(whole.n, parts.n);
        assert!((whole.variance() - parts.variance()).abs() < 1e-14);
    }
}
