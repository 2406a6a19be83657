//! Seeded synthetic datasets.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::stream_keys;
use crate::numeric::{normal, rng_stream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Positive level plus 24- and 12-tick sinusoids and white noise.
    #[default]
    SinusoidMixture,
    /// I.i.d. `N(μ_d, σ²)` per dimension, see [`static_gaussian_params`].
    StaticGaussian,
    /// Linear trend plus white noise.
    TrendPlusNoise,
}

impl SyntheticKind {
    fn key(self) -> u64 {
        match self {
            SyntheticKind::SinusoidMixture => 0,
            SyntheticKind::StaticGaussian => 1,
            SyntheticKind::TrendPlusNoise => 2,
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::SinusoidMixture => "sinusoid-mixture",
            SyntheticKind::StaticGaussian => "static-gaussian",
            SyntheticKind::TrendPlusNoise => "trend-plus-noise",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid-mixture" => Ok(SyntheticKind::SinusoidMixture),
            "static-gaussian" => Ok(SyntheticKind::StaticGaussian),
            "trend-plus-noise" => Ok(SyntheticKind::TrendPlusNoise),
            other => Err(Error::invalid(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

/// Per-dimension `(μ, σ)` of the static Gaussian data.
pub fn static_gaussian_params(dims: usize) -> (Vec<f64>, Vec<f64>) {
    let mu = (0..dims).map(|d| 2.0 + 0.5 * d as f64).collect();
    let sigma = vec![0.5; dims];
    (mu, sigma)
}

/// Noise standard deviation of the sinusoid mixture.
pub const SINUSOID_NOISE: f64 = 0.3;

pub fn generate_synthetic(kind: SyntheticKind, len: usize, dims: usize, seed: u64) -> Result<Dataset> {
    if len == 0 || dims == 0 {
        return Err(Error::invalid("length and dimension must be at least 1"));
    }
    let mut rng = rng_stream(seed).child(stream_keys::DATA).rng(kind.key());
    let mut data = vec![0.0; len * dims];
    match kind {
        SyntheticKind::SinusoidMixture => {
            for d in 0..dims {
                let level = 4.0 + 2.0 * rng.random::<f64>();
                let a = 1.0 + rng.random::<f64>();
                let b = 0.5 + rng.random::<f64>();
                let (pa, pb) = (2.0 * PI * rng.random::<f64>(), 2.0 * PI * rng.random::<f64>());
                for t in 0..len {
                    let tt = t as f64;
                    data[t * dims + d] = level + a * (2.0 * PI * tt / 24.0 + pa).sin() + b * (2.0 * PI * tt / 12.0 + pb).sin();
                }
            }
            for v in &mut data {
                *v += SINUSOID_NOISE * normal(&mut rng);
            }
        }
        SyntheticKind::StaticGaussian => {
            let (mu, sigma) = static_gaussian_params(dims);
            for (i, v) in data.iter_mut().enumerate() {
                let d = i % dims;
                *v = mu[d] + sigma[d] * normal(&mut rng);
            }
        }
        SyntheticKind::TrendPlusNoise => {
            let params: Vec<(f64, f64)> = (0..dims)
                .map(|_| (1.0 + rng.random::<f64>(), 2.0 * rng.random::<f64>() / len as f64))
                .collect();
            for (i, v) in data.iter_mut().enumerate() {
                let (t, d) = (i / dims, i % dims);
                let (level, slope) = params[d];
                *v = level + slope * t as f64 + 0.2 * normal(&mut rng);
            }
        }
    }
    Ok(Dataset::from_values(Tensor::matrix(len, dims, data)))
}
