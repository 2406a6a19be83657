//! Autoregressive sampling and rolling-window evaluation.
//!
//! Sample row `s` of window `w` draws from its own stream, so results do not
//! depend on how rows are chunked or whether chunks run in parallel.

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_chain, ChainOptions, RowStreams};
use crate::error::{Error, Result};
use crate::granularity::build_multigran;
use crate::metrics::{score_window, MetricsReport, ScoreOptions, WindowMetrics};
use crate::model::{stream_keys, MgTsd, Scaler};
use crate::numeric::{rng_stream, Tensor};
use crate::parallel::{map_indexed, Parallelism};

/// Sample rows handled together by one job.
const CHUNK_ROWS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastOptions {
    pub horizon: usize,
    pub num_samples: usize,
    pub seed: u64,
    /// Also integrate and return the coarse chains.
    pub include_coarse: bool,
    /// Distinguishes the streams of different forecast windows.
    pub window_key: u64,
    /// Tick of the first context row (used by calendar covariates).
    pub start_tick: usize,
    pub parallelism: Parallelism,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        Self {
            horizon: 24,
            num_samples: 100,
            seed: 0,
            include_coarse: false,
            window_key: 0,
            start_tick: 0,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSamples {
    /// `[S × G × H × D]` in the data domain; `G` counts returned levels.
    pub samples: Tensor,
    /// Granularity index of each returned level; always starts with 0.
    pub levels: Vec<usize>,
    /// Context scale used to map latents back to the data domain.
    pub scale: Vec<f64>,
}

impl ForecastSamples {
    pub fn num_samples(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn dims(&self) -> usize {
        self.samples.shape()[3]
    }

    /// `[S × H × D]` samples of the `k`-th returned level.
    pub fn level(&self, k: usize) -> Tensor {
        let [s, g, h, d] = [0, 1, 2, 3].map(|i| self.samples.shape()[i]);
        let block = h * d;
        let mut out = Vec::with_capacity(s * block);
        for si in 0..s {
            let off = (si * g + k) * block;
            out.extend_from_slice(&self.samples.data()[off..off + block]);
        }
        Tensor::new(&[s, h, d], out).expect("consistent shape")
    }

    pub fn finest(&self) -> Tensor {
        self.level(0)
    }
}

/// Finest-chain latents captured after each requested reverse step.
pub(crate) struct Captured {
    /// `[k]` → `[S × H × D]`, data domain.
    pub latents: Vec<Tensor>,
}

struct ChunkOut {
    /// `[t][g]` → `[rows × D]`, scaled domain; `None` for skipped levels.
    values: Vec<Vec<Option<Tensor>>>,
    /// `[k][t]` → `[rows × D]`, scaled domain.
    captured: Vec<Vec<Tensor>>,
}

fn check_request(model: &MgTsd, context: &Tensor, opts: &ForecastOptions) -> Result<()> {
    if opts.horizon == 0 {
        return Err(Error::invalid("forecast horizon must be at least 1"));
    }
    if opts.num_samples == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    if context.shape().len() != 2 || context.cols() != model.input_dim {
        return Err(Error::shape(format!(
            "context has shape {:?}, model expects {} dimensions",
            context.shape(),
            model.input_dim
        )));
    }
    if context.rows() < model.train.context_length {
        return Err(Error::invalid(format!(
            "context has {} rows, the model needs {}",
            context.rows(),
            model.train.context_length
        )));
    }
    Ok(())
}

/// Samples `H` future ticks after `context` (its last `C` rows are used).
pub fn forecast(model: &MgTsd, context: &Tensor, opts: &ForecastOptions) -> Result<ForecastSamples> {
    Ok(forecast_impl(model, context, opts, &[])?.0)
}

pub(crate) fn forecast_impl(
    model: &MgTsd,
    context: &Tensor,
    opts: &ForecastOptions,
    capture_steps: &[usize],
) -> Result<(ForecastSamples, Captured)> {
    check_request(model, context, opts)?;
    let (c, d, levels) = (model.train.context_length, model.input_dim, model.num_levels());
    let skip = context.rows() - c;
    let ctx = Tensor::matrix(c, d, context.data()[skip * d..].to_vec());
    let scaler = Scaler::fit(&ctx, model.train.scaling);
    let scaled = scaler.apply(&ctx);
    let mg = build_multigran(&scaled, &model.train.granularities)?;
    let first_tick = opts.start_tick + skip;

    // encode each level's context once; chunks repeat the states
    let active: Vec<bool> = (0..levels).map(|g| g == 0 || opts.include_coarse).collect();
    let mut init_states = Vec::with_capacity(levels);
    for (g, lvl) in mg.levels.iter().enumerate() {
        let enc = model.encoder(g);
        let mut states = enc.init_batch(1);
        if active[g] {
            for t in 0..c {
                let x = Tensor::matrix(1, d, lvl.row(t).to_vec());
                states = enc.step_batch(&x, Some(&[first_tick + t]), &states);
            }
        }
        init_states.push(states);
    }

    let stream = rng_stream(opts.seed).child(stream_keys::FORECAST).child(opts.window_key);
    let den = model.denoiser();
    let chain_opts = ChainOptions {
        sharing: model.train.noise_sharing,
        active: active.clone(),
    };
    let s_total = opts.num_samples;
    let chunks = s_total.div_ceil(CHUNK_ROWS);

    let run_chunk = |ci: usize| -> Result<ChunkOut> {
        let lo = ci * CHUNK_ROWS;
        let hi = (lo + CHUNK_ROWS).min(s_total);
        let rows = hi - lo;
        let rngs = (lo..hi).map(|s| stream.rng(s as u64)).collect();
        let mut streams = RowStreams::new(rngs, d);
        let mut states: Vec<Vec<Tensor>> = init_states
            .iter()
            .map(|layers| layers.iter().map(|h| h.repeat_rows(rows)).collect())
            .collect();
        let mut values = Vec::with_capacity(opts.horizon);
        let mut captured = vec![Vec::with_capacity(opts.horizon); capture_steps.len()];
        for t in 0..opts.horizon {
            let hidden: Vec<Tensor> = states
                .iter()
                .map(|layers| layers.last().expect("at least one layer").clone())
                .collect();
            let out = sample_chain(&den, &model.schedules, &hidden, &mut streams, &chain_opts, &mut |n, g, x| {
                if g == 0 {
                    if let Some(k) = capture_steps.iter().position(|&c| c == n) {
                        captured[k].push(x.clone());
                    }
                }
            })?;
            let tick = first_tick + c + t;
            let ticks = vec![tick; rows];
            for (g, x) in out.iter().enumerate() {
                if let Some(x) = x {
                    if t + 1 < opts.horizon {
                        states[g] = model.encoder(g).step_batch(x, Some(&ticks), &states[g]);
                    }
                }
            }
            values.push(out);
        }
        Ok(ChunkOut { values, captured })
    };

    let outs = map_indexed(chunks, opts.parallelism, run_chunk)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let returned: Vec<usize> = (0..levels).filter(|&g| active[g]).collect();
    let (h, gl) = (opts.horizon, returned.len());
    let mut data = vec![0.0; s_total * gl * h * d];
    let mut captured = vec![vec![0.0; s_total * h * d]; capture_steps.len()];
    for (ci, chunk) in outs.iter().enumerate() {
        let lo = ci * CHUNK_ROWS;
        for t in 0..h {
            for (k, &g) in returned.iter().enumerate() {
                let x = scaler.invert(chunk.values[t][g].as_ref().expect("active level"));
                for r in 0..x.rows() {
                    let off = (((lo + r) * gl + k) * h + t) * d;
                    data[off..off + d].copy_from_slice(x.row(r));
                }
            }
            for (k, per_t) in chunk.captured.iter().enumerate() {
                let x = scaler.invert(&per_t[t]);
                for r in 0..x.rows() {
                    let off = ((lo + r) * h + t) * d;
                    captured[k][off..off + d].copy_from_slice(x.row(r));
                }
            }
        }
    }
    let samples = Tensor::new(&[s_total, gl, h, d], data)?;
    if !samples.all_finite() {
        return Err(Error::Numerical("forecast produced non-finite samples".into()));
    }
    let captured = Captured {
        latents: captured
            .into_iter()
            .map(|v| Tensor::new(&[s_total, h, d], v).expect("consistent shape"))
            .collect(),
    };
    Ok((
        ForecastSamples {
            samples,
            levels: returned,
            scale: scaler.scale,
        },
        captured,
    ))
}

/// Held-out prediction windows: the last `num_windows·H` ticks split into
/// consecutive non-overlapping windows. Returns the first predicted tick of
/// each window.
pub fn evaluation_windows(len: usize, context: usize, horizon: usize, num_windows: usize) -> Result<Vec<usize>> {
    if num_windows == 0 {
        return Err(Error::invalid("at least one evaluation window is required"));
    }
    let held_out = num_windows * horizon;
    if len < held_out + context {
        return Err(Error::invalid(format!(
            "series has {len} ticks, {num_windows} windows of {horizon} plus a context of {context} need {}",
            held_out + context
        )));
    }
    Ok((0..num_windows).map(|k| len - held_out + k * horizon).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub num_windows: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub scoring: ScoreOptions,
    pub parallelism: Parallelism,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            num_windows: 5,
            num_samples: 100,
            seed: 0,
            scoring: ScoreOptions::default(),
            parallelism: Parallelism::default(),
        }
    }
}

/// Forecasts and scores every held-out window of `series`.
pub fn rolling_evaluate(model: &MgTsd, series: &Tensor, opts: &EvalOptions) -> Result<MetricsReport> {
    let (c, h) = (model.train.context_length, model.train.prediction_length);
    let starts = evaluation_windows(series.rows(), c, h, opts.num_windows)?;
    let d = series.cols();
    let results = map_indexed(starts.len(), opts.parallelism, |k| -> Result<WindowMetrics> {
        let start = starts[k];
        let context = Tensor::matrix(c, d, series.data()[(start - c) * d..start * d].to_vec());
        let truth = Tensor::matrix(h, d, series.data()[start * d..(start + h) * d].to_vec());
        let fc = forecast(
            model,
            &context,
            &ForecastOptions {
                horizon: h,
                num_samples: opts.num_samples,
                seed: opts.seed,
                include_coarse: false,
                window_key: k as u64,
                start_tick: start - c,
                parallelism: Parallelism::Sequential,
            },
        )?;
        let (crps_sum, nmae_sum, nrmse_sum) = score_window(&fc.finest(), &truth, opts.scoring)?;
        Ok(WindowMetrics {
            window: k,
            start,
            crps_sum,
            nmae_sum,
            nrmse_sum,
        })
    });
    let windows = results.into_iter().collect::<Result<Vec<_>>>()?;
    MetricsReport::from_windows(windows, opts.num_samples)
}
