//! Share-ratio selection from a pretrained single-granularity model.
//!
//! The finest chain is sampled on held-out windows and its intermediate
//! latent after each grid step `n` (that is, `x_{n−1}`) is scored with
//! CRPS_sum against the coarse-grained truth. The step where a coarse level
//! is closest to the sampling path suggests where that level should join.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{evaluation_windows, forecast_impl, ForecastOptions};
use crate::granularity::{smooth, Smoother};
use crate::metrics::{crps_sum, CrpsMethod};
use crate::model::MgTsd;
use crate::numeric::Tensor;
use crate::parallel::{map_indexed, Parallelism};
use crate::schedule::index_to_share_ratio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    /// Smoothing windows of the coarse targets, in ticks.
    pub windows: Vec<usize>,
    /// Reverse steps to score; empty means every step.
    pub step_grid: Vec<usize>,
    pub num_windows: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            windows: vec![4, 12],
            step_grid: Vec::new(),
            num_windows: 5,
            num_samples: 50,
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareRatioCurve {
    /// Smoothing window of the scored targets.
    pub window: usize,
    /// Ascending reverse steps.
    pub steps: Vec<usize>,
    /// `1 − (n − 1)/N` per step.
    pub ratios: Vec<f64>,
    pub scores: Vec<f64>,
    pub argmin_step: usize,
    pub argmin_ratio: f64,
}

pub fn select_share_ratio(model: &MgTsd, series: &Tensor, opts: &SelectionOptions) -> Result<Vec<ShareRatioCurve>> {
    let n_total = model.steps();
    let grid: Vec<usize> = if opts.step_grid.is_empty() {
        (1..=n_total).collect()
    } else {
        let mut g = opts.step_grid.clone();
        g.sort_unstable();
        g.dedup();
        g
    };
    if grid.iter().any(|&n| n == 0 || n > n_total) {
        return Err(Error::invalid(format!("step grid must lie in [1, {n_total}]")));
    }
    if opts.windows.is_empty() || opts.windows.contains(&0) {
        return Err(Error::invalid("coarse windows must be positive"));
    }
    let (c, h, d) = (model.train.context_length, model.train.prediction_length, series.cols());
    let starts = evaluation_windows(series.rows(), c, h, opts.num_windows)?;

    // scores[w][k][j]: eval window w, grid step k, coarse window j
    let per_window = map_indexed(starts.len(), opts.parallelism, |w| -> Result<Vec<Vec<f64>>> {
        let start = starts[w];
        let full = Tensor::matrix(c + h, d, series.data()[(start - c) * d..(start + h) * d].to_vec());
        let context = Tensor::matrix(c, d, full.data()[..c * d].to_vec());
        let (_, captured) = forecast_impl(
            model,
            &context,
            &ForecastOptions {
                horizon: h,
                num_samples: opts.num_samples,
                seed: opts.seed,
                include_coarse: false,
                window_key: w as u64,
                start_tick: start - c,
                parallelism: Parallelism::Sequential,
            },
            &grid,
        )?;
        let targets = opts
            .windows
            .iter()
            .map(|&s| {
                let coarse = smooth(&full, s, Smoother::Mean)?;
                Ok(Tensor::matrix(h, d, coarse.data()[c * d..].to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        captured
            .latents
            .iter()
            .map(|lat| {
                targets
                    .iter()
                    .map(|tgt| crps_sum(lat, tgt, CrpsMethod::Exact))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let nw = per_window.len() as f64;
    Ok(opts
        .windows
        .iter()
        .enumerate()
        .map(|(j, &window)| {
            let scores: Vec<f64> = (0..grid.len())
                .map(|k| per_window.iter().map(|w| w[k][j]).sum::<f64>() / nw)
                .collect();
            let best = scores
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .expect("non-empty grid");
            ShareRatioCurve {
                window,
                ratios: grid.iter().map(|&n| index_to_share_ratio(n, n_total)).collect(),
                steps: grid.clone(),
                argmin_step: grid[best],
                argmin_ratio: index_to_share_ratio(grid[best], n_total),
                scores,
            }
        })
        .collect())
}

/// `window,step,ratio,score` with one row per curve point.
pub fn curves_csv(curves: &[ShareRatioCurve]) -> String {
    let mut out = String::from("window,step,ratio,score\n");
    for c in curves {
        for ((n, r), s) in c.steps.iter().zip(&c.ratios).zip(&c.scores) {
            let _ = writeln!(out, "{},{n},{r},{s}", c.window);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, TrainConfig};
    use crate::forecast::{rolling_evaluate, EvalOptions};

    fn model() -> MgTsd {
        let train = TrainConfig {
            context_length: 6,
            prediction_length: 4,
            diffusion_steps: 6,
            beta_end: 0.3,
            ..TrainConfig::default()
        }
        .single_granularity();
        let cfg = ModelConfig {
            hidden_size: 4,
            gru_layers: 1,
            denoiser_width: 8,
            denoiser_blocks: 1,
            step_embedding_dim: 4,
            ..ModelConfig::default()
        };
        MgTsd::new(train, cfg, 2).unwrap()
    }

    fn series() -> Tensor {
        Tensor::matrix(40, 2, (0..80).map(|i| 2.0 + (i as f64 * 0.3).sin()).collect())
    }

    #[test]
    fn finest_target_at_step_one_is_forecast_crps() {
        let m = model();
        let opts = SelectionOptions {
            windows: vec![1, 4],
            num_windows: 2,
            num_samples: 8,
            ..SelectionOptions::default()
        };
        let curves = select_share_ratio(&m, &series(), &opts).unwrap();
        let report = rolling_evaluate(
            &m,
            &series(),
            &EvalOptions {
                num_windows: 2,
                num_samples: 8,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert_eq!(curves[0].steps[0], 1);
        assert!((curves[0].scores[0] - report.crps_sum).abs() < 1e-12);
        for c in &curves {
            assert!(c.scores.iter().all(|s| s.is_finite() && *s >= 0.0));
            assert!(c.steps.contains(&c.argmin_step));
            for (n, r) in c.steps.iter().zip(&c.ratios) {
                assert_eq!(*r, 1.0 - (*n as f64 - 1.0) / 6.0);
            }
        }
    }

    #[test]
    fn grid_validation() {
        let m = model();
        let opts = SelectionOptions {
            step_grid: vec![0, 3],
            num_windows: 1,
            ..SelectionOptions::default()
        };
        assert!(select_share_ratio(&m, &series(), &opts).is_err());
    }

    #[test]
    fn csv_rows() {
        let c = ShareRatioCurve {
            window: 4,
            steps: vec![1, 2],
            ratios: vec![1.0, 0.5],
            scores: vec![0.25, 0.5],
            argmin_step: 1,
            argmin_ratio: 1.0,
        };
        assert_eq!(curves_csv(&[c]), "window,step,ratio,score\n4,1,1,0.25\n4,2,0.5,0.5\n");
    }
}
