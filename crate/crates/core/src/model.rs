//! Parameters, schedules and configuration of one MG-TSD model.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ScalingMode, TrainConfig};
use crate::denoiser::{init_denoiser_params, Denoiser};
use crate::encoder::{init_encoder_params, Encoder};
use crate::error::{Error, Result};
use crate::numeric::{rng_stream, ParamStore, RngStream, Tensor};
use crate::schedule::{linear_beta_schedule, schedules_from_ratios, GranularitySchedule, ScheduleSpec};

/// Top-level keys of the per-purpose random streams derived from a seed.
pub(crate) mod stream_keys {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const FORECAST: u64 = 3;
    pub const DATA: u64 = 4;
}

#[derive(Debug, Clone)]
pub struct MgTsd {
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Number of series dimensions `D`.
    pub input_dim: usize,
    pub base: ScheduleSpec,
    pub schedules: Vec<GranularitySchedule>,
    pub params: ParamStore,
}

impl MgTsd {
    /// Fresh model. The denoiser and each level's encoder draw from separate
    /// streams, so adding coarse levels does not change the finest-level
    /// initialization.
    pub fn new(train: TrainConfig, model: ModelConfig, input_dim: usize) -> Result<Self> {
        train.validate()?;
        model.validate()?;
        if input_dim == 0 {
            return Err(Error::invalid("series must have at least one dimension"));
        }
        let base = linear_beta_schedule(train.diffusion_steps, train.beta_start, train.beta_end)?;
        let schedules = schedules_from_ratios(&base, &train.share_ratios)?;

        let root = rng_stream(train.seed).child(stream_keys::INIT);
        let mut params = ParamStore::new();
        init_denoiser_params(&mut params, &model, input_dim, &mut root.child(0).rng(0));
        let enc_root = root.child(1);
        init_encoder_params(&mut params, &model, input_dim, train.num_levels(), &mut |g| {
            enc_root.rng(g as u64)
        });
        Ok(Self {
            train,
            model,
            input_dim,
            base,
            schedules,
            params,
        })
    }

    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(
        train: TrainConfig,
        model: ModelConfig,
        input_dim: usize,
        base: ScheduleSpec,
        schedules: Vec<GranularitySchedule>,
        params: ParamStore,
    ) -> Result<Self> {
        train.validate()?;
        model.validate()?;
        if schedules.len() != train.num_levels() || base.steps() != train.diffusion_steps {
            return Err(Error::config("schedules do not match the configuration"));
        }
        let m = Self {
            train,
            model,
            input_dim,
            base,
            schedules,
            params,
        };
        Denoiser::new(&m.params, &m.model, input_dim)?;
        for g in 0..m.num_levels() {
            Encoder::new(&m.params, &m.model, g, input_dim)?;
        }
        let fresh = Self::new(m.train.clone(), m.model.clone(), input_dim)?;
        if fresh.params.len() != m.params.len() || fresh.params.names().any(|n| !m.params.contains(n)) {
            return Err(Error::config("parameter set does not match the configuration"));
        }
        for (name, t) in fresh.params.iter() {
            if m.params.get(name).map(Tensor::shape) != Some(t.shape()) {
                return Err(Error::shape(format!("parameter `{name}` has the wrong shape")));
            }
        }
        Ok(m)
    }

    pub fn num_levels(&self) -> usize {
        self.schedules.len()
    }

    pub fn steps(&self) -> usize {
        self.base.steps()
    }

    pub fn encoder(&self, g: usize) -> Encoder<'_> {
        Encoder::new(&self.params, &self.model, g, self.input_dim).expect("validated at construction")
    }

    pub fn denoiser(&self) -> Denoiser<'_> {
        Denoiser::new(&self.params, &self.model, self.input_dim).expect("validated at construction")
    }

    pub(crate) fn stream(&self, key: u64) -> RngStream {
        rng_stream(self.train.seed).child(key)
    }
}

/// Per-dimension scale fitted on a context window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mode: ScalingMode,
    pub scale: Vec<f64>,
}

impl Scaler {
    /// Mean magnitude of each column of `context`; zero columns fall back to 1.
    pub fn fit(context: &Tensor, mode: ScalingMode) -> Self {
        let d = context.cols();
        let scale = match mode {
            ScalingMode::None => vec![1.0; d],
            ScalingMode::Mean => {
                let rows = context.rows();
                let mut sums = vec![0.0; d];
                for r in 0..rows {
                    for (s, v) in sums.iter_mut().zip(context.row(r)) {
                        *s += v.abs();
                    }
                }
                sums.into_iter()
                    .map(|s| {
                        let m = s / rows as f64;
                        if m > 0.0 && m.is_finite() {
                            m
                        } else {
                            1.0
                        }
                    })
                    .collect()
            }
        };
        Self { mode, scale }
    }

    /// Divides each column by its scale.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.columnwise(x, |v, s| v / s)
    }

    /// Multiplies each column by its scale.
    pub fn invert(&self, x: &Tensor) -> Tensor {
        self.columnwise(x, |v, s| v * s)
    }

    fn columnwise(&self, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let d = self.scale.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, self.scale[i % d]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granularity::GranularitySpec;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_size: 4,
            gru_layers: 1,
            denoiser_width: 8,
            denoiser_blocks: 1,
            step_embedding_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn coarse_levels_do_not_change_finest_init() {
        let two = TrainConfig {
            diffusion_steps: 10,
            ..TrainConfig::default()
        };
        let one = two.single_granularity();
        let a = MgTsd::new(two, small(), 3).unwrap();
        let b = MgTsd::new(one, small(), 3).unwrap();
        for (name, t) in b.params.iter() {
            assert_eq!(a.params.get(name), Some(t), "{name}");
        }
        assert!(a.params.len() > b.params.len());
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = MgTsd::new(TrainConfig::default(), small(), 2).unwrap();
        let ok = MgTsd::from_parts(
            m.train.clone(),
            m.model.clone(),
            2,
            m.base.clone(),
            m.schedules.clone(),
            m.params.clone(),
        );
        assert!(ok.is_ok());
        let mut params = m.params.clone();
        params.insert("denoiser.out.b", Tensor::zeros(&[3]));
        let bad = MgTsd::from_parts(m.train.clone(), m.model.clone(), 2, m.base.clone(), m.schedules.clone(), params);
        assert!(bad.is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig {
            granularities: vec![GranularitySpec::new(1, 0.5), GranularitySpec::new(4, 0.1)],
            ..TrainConfig::default()
        };
        assert!(MgTsd::new(cfg, small(), 2).is_err());
    }

    #[test]
    fn scaler_roundtrip_and_zero_column() {
        let ctx = Tensor::matrix(2, 2, vec![2.0, 0.0, -4.0, 0.0]);
        let s = Scaler::fit(&ctx, ScalingMode::Mean);
        assert_eq!(s.scale, vec![3.0, 1.0]);
        let x = Tensor::matrix(1, 2, vec![6.0, 5.0]);
        assert_eq!(s.apply(&x).data(), &[2.0, 5.0]);
        assert_eq!(s.invert(&s.apply(&x)), x);
        assert_eq!(Scaler::fit(&ctx, ScalingMode::None).scale, vec![1.0, 1.0]);
    }
}
