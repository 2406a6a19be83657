//! Shared noise-prediction network `ε_θ(x_n, n, h)`.
//!
//! A residual MLP. The input is the concatenation of projected `x_n`,
//! projected `h` and the projected sinusoidal step features. Each residual
//! block is `u ← u + fc2(film(silu(fc1(u))))`, where the FiLM modulation
//! `v·(1 + γ) + β` takes `(γ, β)` from the hidden-state and step
//! projections. The output layer starts at zero, so an untrained network
//! predicts `ε̂ = 0`.
//!
//! The network has no granularity input: levels differ only through `h`.

use rand::Rng;

use crate::config::{Conditioning, ModelConfig};
use crate::error::{Error, Result};
use crate::numeric::{Bound, ParamStore, Tape, Tensor, Var};

const MAX_PERIOD: f64 = 10_000.0;

/// Raw interleaved sin/cos features of a (possibly fractional) position.
pub fn sinusoidal_features(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
        let phase = position * freq;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    out
}

/// Sinusoidal features of diffusion step `n`, before the learned projection.
pub fn diffusion_embedding(n: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::invalid(format!("step embedding dimension {dim} must be even")));
    }
    if n == 0 {
        return Err(Error::invalid("diffusion steps start at 1"));
    }
    Ok(Tensor::vector(sinusoidal_features(n as f64, dim)))
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Adds freshly initialized denoiser parameters.
pub fn init_denoiser_params(store: &mut ParamStore, cfg: &ModelConfig, input_dim: usize, rng: &mut impl Rng) {
    let w = cfg.denoiser_width;
    let mut dense = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64| {
        store.insert(format!("denoiser.{name}.w"), xavier(rng, fan_in, fan_out, gain));
        store.insert(format!("denoiser.{name}.b"), Tensor::zeros(&[fan_out]));
    };
    dense(store, "x_in", input_dim, w, 1.0);
    dense(store, "h_in", cfg.hidden_size, w, 1.0);
    dense(store, "step", cfg.step_embedding_dim, w, 1.0);
    dense(store, "input", 3 * w, w, 1.0);
    for k in 0..cfg.denoiser_blocks {
        dense(store, &format!("block{k}.fc1"), w, w, 1.0);
        dense(store, &format!("block{k}.fc2"), w, w, 0.5);
        if cfg.conditioning == Conditioning::Film {
            dense(store, &format!("block{k}.film"), 2 * w, 2 * w, 0.1);
        }
    }
    store.insert("denoiser.out.w", Tensor::zeros(&[w, input_dim]));
    store.insert("denoiser.out.b", Tensor::zeros(&[input_dim]));
}

/// Borrowed view of the denoiser weights.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'p> {
    params: &'p ParamStore,
    cfg: &'p ModelConfig,
    input_dim: usize,
}

impl<'p> Denoiser<'p> {
    pub fn new(params: &'p ParamStore, cfg: &'p ModelConfig, input_dim: usize) -> Result<Self> {
        let check = |name: &str, shape: &[usize]| -> Result<()> {
            match params.get(name) {
                Some(t) if t.shape() == shape => Ok(()),
                Some(t) => Err(Error::shape(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()))),
                None => Err(Error::invalid(format!("missing denoiser parameter `{name}`"))),
            }
        };
        let w = cfg.denoiser_width;
        check("denoiser.x_in.w", &[input_dim, w])?;
        check("denoiser.h_in.w", &[cfg.hidden_size, w])?;
        check("denoiser.step.w", &[cfg.step_embedding_dim, w])?;
        check("denoiser.out.w", &[w, input_dim])?;
        Ok(Self { params, cfg, input_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_size(&self) -> usize {
        self.cfg.hidden_size
    }

    fn dense(&self, tape: &mut Tape<'_>, bound: &Bound, name: &str, x: Var) -> Var {
        let w = bound.var(&format!("denoiser.{name}.w"));
        let b = bound.var(&format!("denoiser.{name}.b"));
        tape.affine(x, w, b)
    }

    /// Records the network on a tape. `x: [R × D]`, `h: [R × d_h]`; `steps`
    /// holds one diffusion step per row, or a single step shared by all rows.
    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, x: Var, steps: &[usize], h: Var) -> Var {
        let rows = tape.value(x).rows();
        let e = self.cfg.step_embedding_dim;

        let step_raw = if steps.len() == 1 {
            Tensor::matrix(1, e, sinusoidal_features(steps[0] as f64, e))
        } else {
            assert_eq!(steps.len(), rows, "one diffusion step per row");
            let mut data = Vec::with_capacity(rows * e);
            for &n in steps {
                data.extend(sinusoidal_features(n as f64, e));
            }
            Tensor::matrix(rows, e, data)
        };
        let step_raw = tape.constant(step_raw);
        let step_pre = self.dense(tape, bound, "step", step_raw);
        let mut step_emb = tape.silu(step_pre);
        if steps.len() == 1 && rows > 1 {
            step_emb = tape.repeat_rows(step_emb, rows);
        }

        let x_proj = self.dense(tape, bound, "x_in", x);
        let h_pre = self.dense(tape, bound, "h_in", h);
        let h_proj = tape.silu(h_pre);

        let joined = tape.concat_cols(&[x_proj, h_proj, step_emb]);
        let u_pre = self.dense(tape, bound, "input", joined);
        let mut u = tape.silu(u_pre);

        let cond = match self.cfg.conditioning {
            Conditioning::Film => Some(tape.concat_cols(&[h_proj, step_emb])),
            Conditioning::Concat => None,
        };
        let width = self.cfg.denoiser_width;
        for k in 0..self.cfg.denoiser_blocks {
            let a = self.dense(tape, bound, &format!("block{k}.fc1"), u);
            let mut v = tape.silu(a);
            if let Some(c) = cond {
                let film = self.dense(tape, bound, &format!("block{k}.film"), c);
                let gamma = tape.slice_cols(film, 0, width);
                let beta = tape.slice_cols(film, width, width);
                let gain = tape.add_scalar(gamma, 1.0);
                let scaled = tape.mul(v, gain);
                v = tape.add(scaled, beta);
            }
            let out = self.dense(tape, bound, &format!("block{k}.fc2"), v);
            u = tape.add(u, out);
        }
        self.dense(tape, bound, "out", u)
    }

    /// Batched prediction for rows sharing step `n`.
    pub fn predict(&self, x_n: &Tensor, n: usize, hidden: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(x_n.as_matrix());
        let hv = tape.constant(hidden.as_matrix());
        let out = self.forward(&mut tape, &bound, xv, &[n], hv);
        tape.value(out).clone()
    }

    /// `ε_θ(x_n, n, h)` for a single vector.
    pub fn eps_theta(&self, x_n: &Tensor, n: usize, hidden: &[f64]) -> Result<Tensor> {
        if x_n.len() != self.input_dim {
            return Err(Error::shape(format!(
                "denoiser input has {} values, expected {}",
                x_n.len(),
                self.input_dim
            )));
        }
        if hidden.len() != self.cfg.hidden_size {
            return Err(Error::shape(format!(
                "hidden state has {} values, expected {}",
                hidden.len(),
                self.cfg.hidden_size
            )));
        }
        if n == 0 {
            return Err(Error::invalid("diffusion steps start at 1"));
        }
        let x = Tensor::matrix(1, self.input_dim, x_n.data().to_vec());
        let h = Tensor::matrix(1, hidden.len(), hidden.to_vec());
        Ok(Tensor::vector(self.predict(&x, n, &h).into_data()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng_stream;

    fn setup(cond: Conditioning) -> (ParamStore, ModelConfig) {
        let cfg = ModelConfig {
            hidden_size: 6,
            denoiser_width: 8,
            denoiser_blocks: 2,
            step_embedding_dim: 4,
            conditioning: cond,
            ..ModelConfig::default()
        };
        let mut p = ParamStore::new();
        init_denoiser_params(&mut p, &cfg, 3, &mut rng_stream(1).rng(0));
        (p, cfg)
    }

    #[test]
    fn raw_features_at_zero_phase() {
        let f = sinusoidal_features(0.0, 6);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 1.0);
    }

    #[test]
    fn embeddings_distinct_and_finite() {
        let a = diffusion_embedding(5, 16).unwrap();
        let b = diffusion_embedding(6, 16).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.shape(), &[16]);
        assert!(a.all_finite());
        assert!(diffusion_embedding(5, 7).is_err());
    }

    #[test]
    fn zero_output_at_init() {
        for cond in [Conditioning::Film, Conditioning::Concat] {
            let (p, cfg) = setup(cond);
            let d = Denoiser::new(&p, &cfg, 3).unwrap();
            let out = d.eps_theta(&Tensor::vector(vec![1.0, -2.0, 0.5]), 7, &[0.3; 6]).unwrap();
            assert_eq!(out.shape(), &[3]);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batched_matches_single_rows() {
        let (mut p, cfg) = setup(Conditioning::Film);
        let mut rng = rng_stream(4).rng(0);
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let d = Denoiser::new(&p, &cfg, 3).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]);
        let h = Tensor::matrix(2, 6, (0..12).map(|i| (i as f64 * 0.3).cos()).collect());
        let batched = d.predict(&x, 4, &h);
        for r in 0..2 {
            let single = d.eps_theta(&Tensor::vector(x.row(r).to_vec()), 4, h.row(r)).unwrap();
            for (a, b) in single.data().iter().zip(batched.row(r)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let (p, cfg) = setup(Conditioning::Film);
        let d = Denoiser::new(&p, &cfg, 3).unwrap();
        assert!(d.eps_theta(&Tensor::vector(vec![1.0; 4]), 1, &[0.0; 6]).is_err());
        assert!(d.eps_theta(&Tensor::vector(vec![1.0; 3]), 1, &[0.0; 5]).is_err());
        assert!(Denoiser::new(&p, &cfg, 4).is_err());
    }
}
