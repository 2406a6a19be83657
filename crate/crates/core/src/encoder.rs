//! Per-granularity recurrent encoders.
//!
//! Each level owns a stack of GRU layers (`encoder.g{g}.l{k}.*`), or all
//! levels read one shared stack (`encoder.shared.l{k}.*`) when encoders are
//! shared. The denoiser is conditioned on the top layer's state.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::{gru_step, Bound, GruVars, ParamStore, Tape, Tensor, Var};

/// Number of calendar covariates appended when covariates are enabled.
pub const COVARIATE_DIM: usize = 2;

/// Hour-of-day and day-of-week of an hourly tick, scaled to `[-0.5, 0.5]`.
pub fn time_features(tick: usize) -> [f64; COVARIATE_DIM] {
    let hour = (tick % 24) as f64;
    let day = ((tick / 24) % 7) as f64;
    [hour / 23.0 - 0.5, day / 6.0 - 0.5]
}

/// Recurrent state for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    /// `[layers × d_h]`
    pub h: Tensor,
    pub granularity: usize,
    /// Last timestep folded into the state (0 before any input).
    pub t: usize,
}

impl HiddenState {
    /// Top layer state, the conditioning input of the denoiser.
    pub fn top(&self) -> &[f64] {
        self.h.row(self.h.rows() - 1)
    }
}

pub fn param_prefix(cfg: &ModelConfig, g: usize) -> String {
    if cfg.share_encoders {
        "encoder.shared".to_string()
    } else {
        format!("encoder.g{}", g + 1)
    }
}

fn layer_name(prefix: &str, layer: usize, field: &str) -> String {
    format!("{prefix}.l{layer}.{field}")
}

/// Adds freshly initialized encoder parameters for `levels` granularities.
pub fn init_encoder_params(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    input_dim: usize,
    levels: usize,
    rng_for: &mut dyn FnMut(usize) -> rand_chacha::ChaCha8Rng,
) {
    let d_h = cfg.hidden_size;
    let bound = 1.0 / (d_h as f64).sqrt();
    let groups = if cfg.share_encoders { 1 } else { levels };
    for g in 0..groups {
        let prefix = param_prefix(cfg, g);
        let mut rng = rng_for(g);
        for layer in 0..cfg.gru_layers {
            let d_in = if layer == 0 { input_dim + cfg.covariate_dim() } else { d_h };
            let mut uniform = |shape: &[usize]| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("shape")
            };
            let w_ih = uniform(&[d_in, 3 * d_h]);
            let w_hh = uniform(&[d_h, 3 * d_h]);
            let b_ih = uniform(&[3 * d_h]);
            let b_hh = uniform(&[3 * d_h]);
            store.insert(layer_name(&prefix, layer, "w_ih"), w_ih);
            store.insert(layer_name(&prefix, layer, "w_hh"), w_hh);
            store.insert(layer_name(&prefix, layer, "b_ih"), b_ih);
            store.insert(layer_name(&prefix, layer, "b_hh"), b_hh);
        }
    }
}

/// Borrowed view of one level's encoder weights.
#[derive(Debug, Clone, Copy)]
pub struct Encoder<'p> {
    params: &'p ParamStore,
    cfg: &'p ModelConfig,
    granularity: usize,
    input_dim: usize,
}

impl<'p> Encoder<'p> {
    pub fn new(params: &'p ParamStore, cfg: &'p ModelConfig, granularity: usize, input_dim: usize) -> Result<Self> {
        let enc = Self {
            params,
            cfg,
            granularity,
            input_dim,
        };
        let prefix = param_prefix(cfg, granularity);
        for layer in 0..cfg.gru_layers {
            let name = layer_name(&prefix, layer, "w_ih");
            let w = params
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing encoder parameter `{name}`")))?;
            let expected = if layer == 0 { enc.layer0_input() } else { cfg.hidden_size };
            if w.shape() != [expected, 3 * cfg.hidden_size] {
                return Err(Error::shape(format!("`{name}` has shape {:?}", w.shape())));
            }
        }
        Ok(enc)
    }

    pub fn layers(&self) -> usize {
        self.cfg.gru_layers
    }

    pub fn hidden_size(&self) -> usize {
        self.cfg.hidden_size
    }

    fn layer0_input(&self) -> usize {
        self.input_dim + self.cfg.covariate_dim()
    }

    /// Tape handles for every layer, looked up in an already bound store.
    pub fn vars(&self, bound: &Bound) -> Vec<GruVars> {
        let prefix = param_prefix(self.cfg, self.granularity);
        (0..self.cfg.gru_layers)
            .map(|layer| GruVars {
                w_ih: bound.var(&layer_name(&prefix, layer, "w_ih")),
                w_hh: bound.var(&layer_name(&prefix, layer, "w_hh")),
                b_ih: bound.var(&layer_name(&prefix, layer, "b_ih")),
                b_hh: bound.var(&layer_name(&prefix, layer, "b_hh")),
            })
            .collect()
    }

    /// Builds the `[B × (D + covariates)]` input block for one step.
    pub fn input_rows(&self, x: &Tensor, ticks: Option<&[usize]>) -> Tensor {
        if !self.cfg.covariates {
            return x.as_matrix();
        }
        let (rows, d) = (x.rows(), x.cols());
        let width = d + COVARIATE_DIM;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(x.row(r));
            let tick = ticks.map(|t| t[r.min(t.len() - 1)]).unwrap_or(0);
            data.extend_from_slice(&time_features(tick));
        }
        Tensor::matrix(rows, width, data)
    }

    pub fn init_hidden(&self) -> HiddenState {
        HiddenState {
            h: Tensor::zeros(&[self.cfg.gru_layers, self.cfg.hidden_size]),
            granularity: self.granularity,
            t: 0,
        }
    }

    /// Zero states for a batch, one `[B × d_h]` tensor per layer.
    pub fn init_batch(&self, batch: usize) -> Vec<Tensor> {
        (0..self.cfg.gru_layers)
            .map(|_| Tensor::zeros(&[batch, self.cfg.hidden_size]))
            .collect()
    }

    /// One recurrent step on the tape for every layer. Returns new layer states.
    pub fn step_on_tape(&self, tape: &mut Tape<'_>, vars: &[GruVars], input: Var, states: &[Var]) -> Vec<Var> {
        let mut next = Vec::with_capacity(states.len());
        let mut x = input;
        for (w, &h) in vars.iter().zip(states) {
            let h_new = gru_step(tape, x, h, w);
            next.push(h_new);
            x = h_new;
        }
        next
    }

    /// Eager batched step: `x: [B × D]`, `states`: per-layer `[B × d_h]`.
    pub fn step_batch(&self, x: &Tensor, ticks: Option<&[usize]>, states: &[Tensor]) -> Vec<Tensor> {
        let input = self.input_rows(x, ticks);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = self.vars(&bound);
        let xv = tape.constant(input);
        let hv: Vec<Var> = states.iter().map(|h| tape.constant(h.clone())).collect();
        let out = self.step_on_tape(&mut tape, &vars, xv, &hv);
        out.iter().map(|&v| tape.value(v).clone()).collect()
    }

    /// Folds one observation into a single-sequence state.
    pub fn encode_step(&self, x_t: &Tensor, h_prev: &HiddenState) -> Result<HiddenState> {
        if x_t.len() != self.input_dim {
            return Err(Error::shape(format!(
                "encoder input has {} values, expected {}",
                x_t.len(),
                self.input_dim
            )));
        }
        if h_prev.h.shape() != [self.cfg.gru_layers, self.cfg.hidden_size] {
            return Err(Error::shape(format!("hidden state has shape {:?}", h_prev.h.shape())));
        }
        let x = Tensor::matrix(1, self.input_dim, x_t.data().to_vec());
        let states: Vec<Tensor> = (0..h_prev.h.rows())
            .map(|l| Tensor::matrix(1, self.cfg.hidden_size, h_prev.h.row(l).to_vec()))
            .collect();
        let tick = h_prev.t + 1;
        let next = self.step_batch(&x, Some(&[tick]), &states);
        let refs: Vec<&Tensor> = next.iter().collect();
        Ok(HiddenState {
            h: Tensor::concat_rows(&refs),
            granularity: self.granularity,
            t: tick,
        })
    }

    /// Folds a whole context `[t × D]` from the zero state.
    pub fn encode_context(&self, series: &Tensor) -> Result<HiddenState> {
        if series.shape().len() != 2 || series.is_empty() {
            return Err(Error::invalid("empty context"));
        }
        let mut h = self.init_hidden();
        for t in 0..series.rows() {
            h = self.encode_step(&Tensor::vector(series.row(t).to_vec()), &h)?;
        }
        Ok(h)
    }
}
