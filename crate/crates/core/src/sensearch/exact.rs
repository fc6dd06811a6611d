//! Exact distributions of sums of independent discrete set scores.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::abs;

/// Largest support carried through a convolution.
pub const MAX_SUPPORT: usize = 1 << 20;
/// Largest number of per-set split combinations searched for the supremum.
pub const MAX_COMBINATIONS: usize = 4096;

/// A finitely supported distribution: ascending distinct values with masses.
#[derive(Debug, Clone, PartialEq)]
pub struct Discrete {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Discrete {
    pub fn point(v: f64) -> Self {
        Self {
            values: alloc::vec![v],
            probs: alloc::vec![1.0],
        }
    }

    /// Distribution of `self + other` for independent summands. Equal sums
    /// are merged; fails once the support exceeds [`MAX_SUPPORT`].
    pub fn convolve(&self, values: &[f64], probs: &[f64]) -> Result<Self> {
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(self.values.len() * values.len());
        for (a, pa) in self.values.iter().zip(&self.probs) {
            for (b, pb) in values.iter().zip(probs) {
                if *pb > 0.0 {
                    pairs.push((a + b, pa * pb));
                }
            }
        }
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut out = Self {
            values: Vec::with_capacity(pairs.len()),
            probs: Vec::with_capacity(pairs.len()),
        };
        for (v, p) in pairs {
            match out.values.last() {
                Some(last) if *last == v => *out.probs.last_mut().expect("non-empty") += p,
                _ => {
                    out.values.push(v);
                    out.probs.push(p);
                }
            }
        }
        if out.values.len() > MAX_SUPPORT {
            return Err(Error::EnumerationTooLarge(format!(
                "support of {} points exceeds {MAX_SUPPORT}",
                out.values.len()
            )));
        }
        Ok(out)
    }

    /// `P(S >= t)`, counting values within a relative `1e-10` of `t` as ties.
    pub fn upper_tail(&self, t: f64, scale: f64) -> f64 {
        let cut = t - 1e-10 * (1.0 + abs(scale));
        let start = self.values.partition_point(|v| *v < cut);
        self.probs[start..].iter().sum::<f64>().min(1.0)
    }
}

/// Exact upper tail of a sum of independent per-set laws.
pub fn sum_tail(sets: &[(Vec<f64>, Vec<f64>)], t: f64, scale: f64) -> Result<f64> {
    let mut dist = Discrete::point(0.0);
    for (values, probs) in sets {
        dist = dist.convolve(values, probs)?;
    }
    Ok(dist.upper_tail(t, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn merges_equal_sums() {
        let d = Discrete::point(0.0)
            .convolve(&[0.0, 1.0], &[0.5, 0.5])
            .unwrap()
            .convolve(&[0.0, 1.0], &[0.5, 0.5])
            .unwrap();
        assert_eq!(d.values, vec![0.0, 1.0, 2.0]);
        assert_eq!(d.probs, vec![0.25, 0.5, 0.25]);
        assert_eq!(d.upper_tail(1.0, 2.0), 0.75);
        assert_eq!(d.upper_tail(2.5, 2.0), 0.0);
    }
}
