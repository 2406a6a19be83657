//! Multi-granularity guided diffusion for probabilistic multivariate
//! time-series forecasting.
//!
//! A single noise-prediction network is trained on the finest series and on
//! coarse-grained copies of it. Each coarse level is noised with a truncated
//! copy of the variance schedule, so its targets constrain the intermediate
//! latents of the finest sampling chain.

pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod forecast;
pub mod granularity;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod parallel;
pub mod schedule;
pub mod selection;
pub mod spectrum;
pub mod trainer;

pub use config::{Conditioning, LrSchedule, MaskMode, ModelConfig, NoiseSharing, ScalingMode, TrainConfig};
pub use error::{Error, Result};
pub use forecast::{evaluation_windows, forecast, rolling_evaluate, EvalOptions, ForecastOptions, ForecastSamples};
pub use granularity::{build_multigran, smooth, GranularitySpec, MultiGranSeries, Smoother};
pub use metrics::{crps_empirical, crps_sum, nmae_sum, nrmse_sum, CrpsMethod, MetricsReport, PointForecast};
pub use model::{MgTsd, Scaler};
pub use numeric::Tensor;
pub use parallel::Parallelism;
pub use schedule::{derive_gran_schedule, linear_beta_schedule, GranularitySchedule, ScheduleSpec};
pub use selection::{select_share_ratio, SelectionOptions, ShareRatioCurve};
pub use spectrum::fft_spectrum;
pub use trainer::{train, EpochLoss, TrainOutput};
