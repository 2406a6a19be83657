//! Probabilistic and point forecast scores on dimension-summed series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrpsMethod {
    /// Exact integral of the empirical CDF.
    #[default]
    Exact,
    /// Average pinball loss on the 0.05..0.95 quantile grid.
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointForecast {
    #[default]
    Mean,
    Median,
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `mean|X − x| − ½·mean|X − X′|` over all `S²` ordered pairs, which is the
/// exact CRPS of the empirical CDF.
pub fn crps_empirical(samples: &[f64], obs: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("CRPS needs at least one sample"));
    }
    let s = sorted(samples);
    let n = s.len() as f64;
    let abs_err = s.iter().map(|x| (x - obs).abs()).sum::<f64>() / n;
    // Σ_{i,j}|x_i − x_j| = 2·Σ_i (2i − S + 1)·x_(i) for ascending x_(i)
    let spread: f64 = s
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum();
    Ok((abs_err - spread / (n * n)).max(0.0))
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// `2·mean_q ρ_q(x − q̂)` over `q ∈ {0.05, 0.10, …, 0.95}`.
pub fn crps_quantile(samples: &[f64], obs: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("CRPS needs at least one sample"));
    }
    let s = sorted(samples);
    let levels: Vec<f64> = (1..=19).map(|k| k as f64 * 0.05).collect();
    let total: f64 = levels
        .iter()
        .map(|&q| {
            let diff = obs - quantile(&s, q);
            2.0 * if diff >= 0.0 { q * diff } else { (q - 1.0) * diff }
        })
        .sum();
    Ok(total / levels.len() as f64)
}

fn check_samples(samples: &Tensor, obs: &Tensor) -> Result<(usize, usize, usize)> {
    match (samples.shape(), obs.shape()) {
        ([s, h, d], [h2, d2]) if h == h2 && d == d2 => Ok((*s, *h, *d)),
        (a, b) => Err(Error::shape(format!("samples {a:?} do not match observations {b:?}"))),
    }
}

/// Per-sample dimension sums, `[S × H]`.
fn summed(samples: &Tensor, s: usize, h: usize, d: usize) -> Vec<f64> {
    let x = samples.data();
    (0..s * h).map(|i| x[i * d..(i + 1) * d].iter().sum()).collect()
}

/// CRPS of dimension-summed samples `[S × H × D]` against `obs: [H × D]`,
/// averaged over the horizon.
pub fn crps_sum(samples: &Tensor, obs: &Tensor, method: CrpsMethod) -> Result<f64> {
    let (s, h, d) = check_samples(samples, obs)?;
    let sums = summed(samples, s, h, d);
    let mut total = 0.0;
    let mut column = vec![0.0; s];
    for t in 0..h {
        for (k, c) in column.iter_mut().enumerate() {
            *c = sums[k * h + t];
        }
        let y: f64 = obs.row(t).iter().sum();
        total += match method {
            CrpsMethod::Exact => crps_empirical(&column, y)?,
            CrpsMethod::Quantile => crps_quantile(&column, y)?,
        };
    }
    Ok(total / h as f64)
}

/// Per-timestep point forecast `[H × D]` from samples `[S × H × D]`.
pub fn point_forecast(samples: &Tensor, how: PointForecast) -> Result<Tensor> {
    let (s, h, d) = match samples.shape() {
        [s, h, d] if *s > 0 => (*s, *h, *d),
        other => return Err(Error::shape(format!("expected [S × H × D] samples, got {other:?}"))),
    };
    let x = samples.data();
    let mut out = vec![0.0; h * d];
    let mut column = vec![0.0; s];
    for (i, o) in out.iter_mut().enumerate() {
        for (k, c) in column.iter_mut().enumerate() {
            *c = x[k * h * d + i];
        }
        *o = match how {
            PointForecast::Mean => column.iter().sum::<f64>() / s as f64,
            PointForecast::Median => quantile(&sorted(&column), 0.5),
        };
    }
    Ok(Tensor::matrix(h, d, out))
}

fn summed_pair(pred: &Tensor, obs: &Tensor) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if pred.shape() != obs.shape() || obs.is_empty() {
        return Err(Error::shape(format!(
            "prediction {:?} does not match observations {:?}",
            pred.shape(),
            obs.shape()
        )));
    }
    let rows = obs.rows();
    let p: Vec<f64> = (0..rows).map(|t| pred.row(t).iter().sum()).collect();
    let y: Vec<f64> = (0..rows).map(|t| obs.row(t).iter().sum()).collect();
    let norm = y.iter().map(|v| v.abs()).sum::<f64>() / rows as f64;
    if !(norm > 0.0) {
        return Err(Error::invalid("degenerate normalizer: mean |Y| is zero"));
    }
    Ok((p, y, norm))
}

/// `mean|Ŷ − Y| / mean|Y|` on dimension sums.
pub fn nmae_sum(pred: &Tensor, obs: &Tensor) -> Result<f64> {
    let (p, y, norm) = summed_pair(pred, obs)?;
    let mae = p.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
    Ok(mae / norm)
}

/// `√(mean((Ŷ − Y)²) / mean|Y|)` on dimension sums. The normalizer sits
/// inside the root.
pub fn nrmse_sum(pred: &Tensor, obs: &Tensor) -> Result<f64> {
    let (p, y, norm) = summed_pair(pred, obs)?;
    let mse = p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    Ok((mse / norm).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub crps: CrpsMethod,
    pub point: PointForecast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window: usize,
    /// First predicted tick.
    pub start: usize,
    pub crps_sum: f64,
    pub nmae_sum: f64,
    pub nrmse_sum: f64,
}

/// Scores one window of samples `[S × H × D]` against `truth: [H × D]`.
pub fn score_window(samples: &Tensor, truth: &Tensor, opts: ScoreOptions) -> Result<(f64, f64, f64)> {
    let crps = crps_sum(samples, truth, opts.crps)?;
    let point = point_forecast(samples, opts.point)?;
    Ok((crps, nmae_sum(&point, truth)?, nrmse_sum(&point, truth)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub crps_sum: f64,
    pub crps_sum_std: f64,
    pub nmae_sum: f64,
    pub nmae_sum_std: f64,
    pub nrmse_sum: f64,
    pub nrmse_sum_std: f64,
    pub num_samples: usize,
    pub windows: Vec<WindowMetrics>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_windows(windows: Vec<WindowMetrics>, num_samples: usize) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::invalid("no windows to aggregate"));
        }
        let (crps_sum, crps_sum_std) = mean_std(windows.iter().map(|w| w.crps_sum));
        let (nmae_sum, nmae_sum_std) = mean_std(windows.iter().map(|w| w.nmae_sum));
        let (nrmse_sum, nrmse_sum_std) = mean_std(windows.iter().map(|w| w.nrmse_sum));
        Ok(Self {
            crps_sum,
            crps_sum_std,
            nmae_sum,
            nmae_sum_std,
            nrmse_sum,
            nrmse_sum_std,
            num_samples,
            windows,
        })
    }
}
