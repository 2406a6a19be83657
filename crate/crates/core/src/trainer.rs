//! Training loop.
//!
//! Each batch element is a random window of `C + H` ticks. The window is
//! mean-scaled on its context, coarse levels are built from the scaled
//! window, and every level runs its own teacher-forced encoder. Prediction
//! row `t` is conditioned on the state after `t − 1` and shares one diffusion
//! step and one noise draw across all levels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{MaskMode, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::granularity::build_multigran;
use crate::model::{stream_keys, MgTsd, Scaler};
use crate::numeric::{adam_step, normal, AdamConfig, AdamState, Tape, Tensor, Var};

/// Random draws for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// First tick of each window.
    pub starts: Vec<usize>,
    /// Diffusion step per prediction row, rows ordered `(t, b)`.
    pub steps: Vec<usize>,
    /// `[H·B × D]`
    pub eps: Tensor,
}

/// Draws window starts, then one `(n, ε)` pair per prediction row.
pub fn draw_batch(rng: &mut impl Rng, series_len: usize, cfg: &TrainConfig, dims: usize) -> Result<WindowBatch> {
    let len = cfg.window_length();
    if series_len < len {
        return Err(Error::invalid(format!(
            "series has {series_len} ticks, a training window needs {len}"
        )));
    }
    let starts = (0..cfg.batch_size)
        .map(|_| rng.random_range(0..=series_len - len))
        .collect();
    let rows = cfg.prediction_length * cfg.batch_size;
    let mut steps = Vec::with_capacity(rows);
    let mut eps = Vec::with_capacity(rows * dims);
    for _ in 0..rows {
        steps.push(rng.random_range(1..=cfg.diffusion_steps));
        for _ in 0..dims {
            eps.push(normal(rng));
        }
    }
    Ok(WindowBatch {
        starts,
        steps,
        eps: Tensor::matrix(rows, dims, eps),
    })
}

/// `levels[g][t]` is the `[B × D]` block of scaled level-`g` values at window
/// position `t`.
struct PreparedBatch {
    levels: Vec<Vec<Tensor>>,
    ticks: Vec<Vec<usize>>,
}

fn prepare(model: &MgTsd, series: &Tensor, starts: &[usize]) -> Result<PreparedBatch> {
    let cfg = &model.train;
    let (len, c, d) = (cfg.window_length(), cfg.context_length, model.input_dim);
    let b = starts.len();
    let levels_n = model.num_levels();
    let mut levels = vec![vec![vec![0.0; b * d]; len]; levels_n];
    for (bi, &start) in starts.iter().enumerate() {
        if start + len > series.rows() {
            return Err(Error::invalid(format!("window at {start} runs past the series end")));
        }
        let window = Tensor::matrix(len, d, series.data()[start * d..(start + len) * d].to_vec());
        let ctx = Tensor::matrix(c, d, window.data()[..c * d].to_vec());
        let scaled = Scaler::fit(&ctx, cfg.scaling).apply(&window);
        let mg = build_multigran(&scaled, &cfg.granularities)?;
        for (g, lvl) in mg.levels.iter().enumerate() {
            for t in 0..len {
                levels[g][t][bi * d..(bi + 1) * d].copy_from_slice(lvl.row(t));
            }
        }
    }
    let levels = levels
        .into_iter()
        .map(|per_t| per_t.into_iter().map(|v| Tensor::matrix(b, d, v)).collect())
        .collect();
    let ticks = (0..len).map(|t| starts.iter().map(|s| s + t).collect()).collect();
    Ok(PreparedBatch { levels, ticks })
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: f64,
    /// `L^(g)` with masked terms counted as zero.
    pub per_granularity: Vec<f64>,
    pub grads: BTreeMap<String, Tensor>,
}

/// `L_final` of one batch and its gradient with respect to every parameter.
/// Only the ticks inside each window are read.
pub fn batch_loss(model: &MgTsd, series: &Tensor, batch: &WindowBatch) -> Result<BatchLoss> {
    let cfg = &model.train;
    let (c, h, d) = (cfg.context_length, cfg.prediction_length, model.input_dim);
    let b = batch.starts.len();
    let rows = h * b;
    if batch.steps.len() != rows || batch.eps.shape() != [rows, d] {
        return Err(Error::shape("batch draws do not match the window count"));
    }
    if let Some(&n) = batch.steps.iter().find(|&&n| n == 0 || n > model.steps()) {
        return Err(Error::invalid(format!("diffusion step {n} out of range")));
    }
    let prep = prepare(model, series, &batch.starts)?;
    let weights = cfg.weights();

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let den = model.denoiser();
    let mut total: Option<Var> = None;
    let mut per_vars = Vec::with_capacity(model.num_levels());

    for g in 0..model.num_levels() {
        let enc = model.encoder(g);
        let vars = enc.vars(&bound);
        let mut states: Vec<Var> = enc.init_batch(b).into_iter().map(|s| tape.constant(s)).collect();
        let mut tops = Vec::with_capacity(h);
        for t in 0..c + h - 1 {
            let input = tape.constant(enc.input_rows(&prep.levels[g][t], Some(&prep.ticks[t])));
            states = enc.step_on_tape(&mut tape, &vars, input, &states);
            if t + 1 >= c {
                tops.push(*states.last().expect("at least one layer"));
            }
        }
        let hcond = tape.concat_rows(&tops);

        let x0_parts: Vec<&Tensor> = prep.levels[g][c..].iter().collect();
        let x0 = Tensor::concat_rows(&x0_parts);
        let gs = &model.schedules[g];
        let mut noisy = x0.clone();
        let mut row_w = Vec::with_capacity(rows);
        let norm = 1.0 / (rows * d) as f64;
        for (r, &n) in batch.steps.iter().enumerate() {
            let (sa, sb) = (gs.a(n).sqrt(), gs.b(n).sqrt());
            for (x, e) in noisy.row_mut(r).iter_mut().zip(batch.eps.row(r)) {
                *x = sa * *x + sb * e;
            }
            let masked = cfg.mask_mode == MaskMode::Mask && gs.is_frozen(n);
            row_w.push(if masked { 0.0 } else { norm });
        }
        let xv = tape.constant(noisy);
        let pred = den.forward(&mut tape, &bound, xv, &batch.steps, hcond);
        let lg = tape.weighted_sq_err(pred, batch.eps.clone(), row_w);
        per_vars.push(lg);
        let term = tape.scale(lg, weights[g]);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let loss = total.expect("at least one level");
    let grads = tape.grad(loss, &bound.named())?;
    Ok(BatchLoss {
        total: tape.value(loss).data()[0],
        per_granularity: per_vars.iter().map(|&v| tape.value(v).data()[0]).collect(),
        grads,
    })
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// 1-based
    pub epoch: usize,
    pub mean_loss: f64,
    pub per_granularity: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: MgTsd,
    pub trace: Vec<EpochLoss>,
}

pub fn train(series: &Tensor, train_cfg: TrainConfig, model_cfg: ModelConfig) -> Result<TrainOutput> {
    let mut model = MgTsd::new(train_cfg, model_cfg, series.cols())?;
    let trace = fit(&mut model, series)?;
    Ok(TrainOutput { model, trace })
}

fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let sq: f64 = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Runs the configured number of epochs on `series: [T × D]`.
pub fn fit(model: &mut MgTsd, series: &Tensor) -> Result<Vec<EpochLoss>> {
    if series.shape().len() != 2 || series.cols() != model.input_dim {
        return Err(Error::shape(format!(
            "series has shape {:?}, model expects {} dimensions",
            series.shape(),
            model.input_dim
        )));
    }
    let cfg = model.train.clone();
    if series.rows() < cfg.window_length() {
        return Err(Error::invalid(format!(
            "series has {} ticks, a training window needs {}",
            series.rows(),
            cfg.window_length()
        )));
    }
    let mut rng = model.stream(stream_keys::TRAIN).rng(0);
    let mut adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let total_steps = cfg.epochs * cfg.batches_per_epoch;
    let mut state = AdamState::new();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        let mut per = vec![0.0; model.num_levels()];
        for step in 0..cfg.batches_per_epoch {
            let batch = draw_batch(&mut rng, series.rows(), &cfg, model.input_dim)?;
            let mut out = batch_loss(model, series, &batch)?;
            let finite = out.total.is_finite() && out.grads.values().all(Tensor::all_finite);
            if !finite {
                let msg = format!(
                    "non-finite loss at epoch {epoch}, batch {}, windows starting at {:?}",
                    step + 1,
                    batch.starts
                );
                log::error!("{msg}");
                return Err(Error::Numerical(msg));
            }
            if let Some(c) = cfg.grad_clip {
                clip_grads(&mut out.grads, c);
            }
            adam.lr = cfg
                .lr_schedule
                .rate(cfg.learning_rate, (epoch - 1) * cfg.batches_per_epoch + step, total_steps);
            adam_step(&mut model.params, &out.grads, &mut state, &adam)?;
            sum += out.total;
            for (p, v) in per.iter_mut().zip(&out.per_granularity) {
                *p += v;
            }
        }
        let k = cfg.batches_per_epoch as f64;
        let entry = EpochLoss {
            epoch,
            mean_loss: sum / k,
            per_granularity: per.into_iter().map(|v| v / k).collect(),
        };
        log::info!("epoch {epoch}: mean loss {:.6}", entry.mean_loss);
        trace.push(entry);
    }
    Ok(trace)
}

/// `epoch,mean_loss,loss_g1,...` with one row per epoch.
pub fn loss_trace_csv(trace: &[EpochLoss]) -> String {
    let levels = trace.first().map_or(0, |e| e.per_granularity.len());
    let mut out = String::from("epoch,mean_loss");
    for g in 1..=levels {
        let _ = write!(out, ",loss_g{g}");
    }
    out.push('\n');
    for e in trace {
        let _ = write!(out, "{},{}", e.epoch, e.mean_loss);
        for v in &e.per_granularity {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng_stream;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            hidden_size: 6,
            gru_layers: 1,
            denoiser_width: 8,
            denoiser_blocks: 1,
            step_embedding_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batches_per_epoch: 3,
            batch_size: 2,
            learning_rate: 1e-2,
            context_length: 5,
            prediction_length: 3,
            diffusion_steps: 10,
            beta_end: 0.2,
            ..TrainConfig::default()
        }
    }

    fn series(t: usize, d: usize) -> Tensor {
        Tensor::matrix(t, d, (0..t * d).map(|i| 2.0 + (i as f64 * 0.37).sin()).collect())
    }

    #[test]
    fn short_series_rejected() {
        let err = train(&series(7, 2), tiny_train(), tiny_model());
        assert!(err.is_err());
    }

    #[test]
    fn deterministic_trace() {
        let s = series(40, 2);
        let a = train(&s, tiny_train(), tiny_model()).unwrap();
        let b = train(&s, tiny_train(), tiny_model()).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 2);
        assert!(a.trace.iter().all(|e| e.mean_loss >= 0.0));
    }

    #[test]
    fn nan_input_aborts() {
        let mut s = series(40, 2);
        s.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
        match train(&s, tiny_train(), tiny_model()) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("epoch 1")),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let trace = vec![EpochLoss {
            epoch: 1,
            mean_loss: 0.5,
            per_granularity: vec![0.25, 0.75],
        }];
        assert_eq!(loss_trace_csv(&trace), "epoch,mean_loss,loss_g1,loss_g2\n1,0.5,0.25,0.75\n");
    }

    #[test]
    fn batch_draws_independent_of_levels() {
        let cfg = tiny_train();
        let a = draw_batch(&mut rng_stream(1).rng(0), 40, &cfg, 2).unwrap();
        let b = draw_batch(&mut rng_stream(1).rng(0), 40, &cfg.single_granularity(), 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clip_limits_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::vector(vec![3.0, 4.0]));
        clip_grads(&mut g, 1.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }
}
