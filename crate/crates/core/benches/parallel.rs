use criterion::{criterion_group, criterion_main, Criterion};

use mgtsd::io::{generate_synthetic, SyntheticKind};
use mgtsd::{forecast, rolling_evaluate, EvalOptions, ForecastOptions, MgTsd, ModelConfig, Parallelism, TrainConfig};

fn model(dims: usize) -> MgTsd {
    let train = TrainConfig {
        diffusion_steps: 50,
        ..TrainConfig::default()
    };
    let cfg = ModelConfig {
        hidden_size: 32,
        gru_layers: 1,
        denoiser_width: 32,
        denoiser_blocks: 2,
        step_embedding_dim: 16,
        ..ModelConfig::default()
    };
    MgTsd::new(train, cfg, dims).unwrap()
}

fn bench_modes(c: &mut Criterion) {
    let data = generate_synthetic(SyntheticKind::SinusoidMixture, 400, 8, 1).unwrap();
    let m = model(8);
    let context = mgtsd::Tensor::matrix(24, 8, data.values.data()[..24 * 8].to_vec());

    let mut group = c.benchmark_group("forecast_64_samples");
    group.sample_size(10);
    for mode in [Parallelism::Sequential, Parallelism::Parallel] {
        group.bench_function(format!("{mode:?}"), |b| {
            b.iter(|| {
                forecast(
                    &m,
                    &context,
                    &ForecastOptions {
                        horizon: 24,
                        num_samples: 64,
                        parallelism: mode,
                        ..ForecastOptions::default()
                    },
                )
                .unwrap()
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("rolling_evaluate_4_windows");
    group.sample_size(10);
    for mode in [Parallelism::Sequential, Parallelism::Parallel] {
        group.bench_function(format!("{mode:?}"), |b| {
            b.iter(|| {
                rolling_evaluate(
                    &m,
                    &data.values,
                    &EvalOptions {
                        num_windows: 4,
                        num_samples: 16,
                        parallelism: mode,
                        ..EvalOptions::default()
                    },
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_modes);
criterion_main!(benches);
