//! Diagonal Gaussian latent variables: reparameterized sampling and closed-form KL.
//!
//! Everything here runs in `f64` regardless of the precision the networks use,
//! so the values can be checked against numerical integration.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A Gaussian with diagonal covariance, parameterized by mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        if mean.len() != stddev.len() {
            return Err(Error::InvalidGaussian(format!(
                "mean has {} entries but stddev has {}",
                mean.len(),
                stddev.len()
            )));
        }
        if mean.is_empty() {
            return Err(Error::InvalidGaussian("zero dimension".into()));
        }
        if let Some(i) = mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::InvalidGaussian(format!("mean[{i}] is not finite")));
        }
        if let Some(i) = stddev.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidGaussian(format!(
                "stddev[{i}] = {} is not a finite positive number",
                stddev[i]
            )));
        }
        Ok(Self { mean, stddev })
    }

    /// Builds a Gaussian from log standard deviations, which is how the networks emit them.
    pub fn from_log_stddev(mean: Vec<f64>, log_stddev: &[f64]) -> Result<Self> {
        Self::new(mean, log_stddev.iter().map(|l| l.exp()).collect())
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            stddev: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }
}

/// Temperature and seed for drawing latent codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be a finite non-negative number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `z = mean + temperature * (eps * stddev)` for caller-supplied noise `eps`.
pub fn sample_with_noise(g: &DiagonalGaussian, temperature: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            actual: eps.len(),
        });
    }
    Ok(g.mean
        .iter()
        .zip(&g.stddev)
        .zip(eps)
        .map(|((m, s), e)| m + temperature * (e * s))
        .collect())
}

/// Draws one reparameterized sample, consuming `g.dim()` standard normals from `rng`.
///
/// At zero temperature no noise is drawn and the mean is returned unchanged.
pub fn sample<R: Rng + ?Sized>(g: &DiagonalGaussian, temperature: f64, rng: &mut R) -> Vec<f64> {
    if temperature == 0.0 {
        return g.mean.clone();
    }
    g.mean
        .iter()
        .zip(&g.stddev)
        .map(|(m, s)| {
            let e: f64 = rng.sample(StandardNormal);
            m + temperature * (e * s)
        })
        .collect()
}

/// Draws `dim` i.i.d. standard normals.
pub fn standard_normal_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `KL(g || N(0, I))`.
pub fn kl_to_standard_normal(g: &DiagonalGaussian) -> f64 {
    g.mean
        .iter()
        .zip(&g.stddev)
        .map(|(m, s)| 0.5 * (s * s + m * m - 1.0) - s.ln())
        .sum::<f64>()
        .max(0.0)
}

/// `KL(q || p)` for diagonal Gaussians of equal dimension.
pub fn kl_between(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            actual: p.dim(),
        });
    }
    let kl = q
        .mean
        .iter()
        .zip(&q.stddev)
        .zip(p.mean.iter().zip(&p.stddev))
        .map(|((mq, sq), (mp, sp))| {
            let ratio = sq / sp;
            let diff = (mq - mp) / sp;
            0.5 * (ratio * ratio + diff * diff - 1.0) - ratio.ln()
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}
