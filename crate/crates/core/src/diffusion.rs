//! Forward noising, guidance losses and the reverse sampler.
//!
//! Level `g` is noised with its own truncated schedule:
//! `x_n = √a_n·x_0 + √b_n·ε`. On frozen steps (`n < N_*`) the level is still
//! clean, its loss terms are masked by default, and the reverse step is the
//! identity.

use rand::Rng;

use crate::config::{MaskMode, NoiseSharing};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::numeric::{normal, Tensor};
use crate::schedule::GranularitySchedule;

/// Anything that predicts the injected noise for a batch of rows sharing one
/// diffusion step.
pub trait NoisePredictor {
    /// `x_n: [R × D]`, `hidden: [R × d_h]` → `[R × D]`
    fn predict(&self, x_n: &Tensor, n: usize, hidden: &Tensor) -> Tensor;
}

impl NoisePredictor for Denoiser<'_> {
    fn predict(&self, x_n: &Tensor, n: usize, hidden: &Tensor) -> Tensor {
        Denoiser::predict(self, x_n, n, hidden)
    }
}

fn check_step(n: usize, gs: &GranularitySchedule) -> Result<()> {
    if n == 0 || n > gs.steps() {
        return Err(Error::invalid(format!("diffusion step {n} outside [1, {}]", gs.steps())));
    }
    Ok(())
}

/// `√a_n·x_0 + √b_n·ε` under the level's schedule.
pub fn forward_noise(x0: &Tensor, n: usize, gs: &GranularitySchedule, eps: &Tensor) -> Result<Tensor> {
    check_step(n, gs)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "x0 {:?} and noise {:?} differ",
            x0.shape(),
            eps.shape()
        )));
    }
    let (sa, sb) = (gs.a(n).sqrt(), gs.b(n).sqrt());
    Ok(x0.zip_map(eps, |x, e| sa * x + sb * e))
}

/// Result of one loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossTerm {
    Value(f64),
    /// The level is still clean at this step; the term is excluded.
    Masked,
}

impl LossTerm {
    pub fn value_or_zero(self) -> f64 {
        match self {
            LossTerm::Value(v) => v,
            LossTerm::Masked => 0.0,
        }
    }
}

/// Mean squared noise-prediction error per dimension. Rows of `x0` are
/// independent terms and are averaged.
pub fn guidance_loss_term<P: NoisePredictor>(
    x0: &Tensor,
    n: usize,
    hidden: &Tensor,
    eps: &Tensor,
    gs: &GranularitySchedule,
    predictor: &P,
    mask: MaskMode,
) -> Result<LossTerm> {
    check_step(n, gs)?;
    if mask == MaskMode::Mask && gs.is_frozen(n) {
        return Ok(LossTerm::Masked);
    }
    let x_n = forward_noise(x0, n, gs, eps)?.as_matrix();
    let h = hidden.as_matrix();
    if h.rows() != x_n.rows() {
        return Err(Error::shape(format!(
            "{} hidden rows for {} samples",
            h.rows(),
            x_n.rows()
        )));
    }
    let pred = predictor.predict(&x_n, n, &h);
    let sq: f64 = pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(p, e)| (e - p) * (e - p))
        .sum();
    Ok(LossTerm::Value(sq / eps.len() as f64))
}

/// One level's inputs to the weighted loss.
#[derive(Debug, Clone)]
pub struct LevelInput {
    pub x0: Tensor,
    pub hidden: Tensor,
    pub eps: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// `L^(g)`, `None` where the term was masked.
    pub per_granularity: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub masked: usize,
    pub total: f64,
}

/// `L_final = Σ_g ω^g·L^(g)`, masked terms contributing zero.
pub fn final_loss<P: NoisePredictor>(
    levels: &[LevelInput],
    n: usize,
    weights: &[f64],
    schedules: &[GranularitySchedule],
    predictor: &P,
    mask: MaskMode,
) -> Result<LossReport> {
    if levels.len() != weights.len() || levels.len() != schedules.len() {
        return Err(Error::invalid("levels, weights and schedules must have equal length"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("loss weights sum to {sum}, expected 1")));
    }
    let mut per = Vec::with_capacity(levels.len());
    let mut total = 0.0;
    let mut masked = 0;
    for ((lvl, gs), &w) in levels.iter().zip(schedules).zip(weights) {
        match guidance_loss_term(&lvl.x0, n, &lvl.hidden, &lvl.eps, gs, predictor, mask)? {
            LossTerm::Value(v) => {
                total += w * v;
                per.push(Some(v));
            }
            LossTerm::Masked => {
                masked += 1;
                per.push(None);
            }
        }
    }
    Ok(LossReport {
        per_granularity: per,
        weights: weights.to_vec(),
        masked,
        total,
    })
}

/// `x_{n−1} = (x_n − β_n/√(1 − a_n)·ε_θ)/√α_n + √σ_n·z`; the identity when
/// `β_n = 0`.
pub fn reverse_step<P: NoisePredictor>(
    x_n: &Tensor,
    n: usize,
    hidden: &Tensor,
    gs: &GranularitySchedule,
    predictor: &P,
    z: &Tensor,
) -> Result<Tensor> {
    check_step(n, gs)?;
    if z.len() != x_n.len() {
        return Err(Error::shape("noise and latent differ in size"));
    }
    let beta = gs.beta(n);
    if beta == 0.0 {
        return Ok(x_n.clone());
    }
    let x = x_n.as_matrix();
    let eps = predictor.predict(&x, n, &hidden.as_matrix());
    let coef = beta / (1.0 - gs.a(n)).sqrt();
    let inv_sqrt_alpha = 1.0 / gs.alpha(n).sqrt();
    let sd = gs.sigma(n).sqrt();
    let mut out = x;
    for ((o, e), zv) in out.data_mut().iter_mut().zip(eps.data()).zip(z.data()) {
        *o = (*o - coef * e) * inv_sqrt_alpha + sd * zv;
    }
    out.reshape(x_n.shape())
}

/// One independent random stream per sample row.
pub struct RowStreams<R: Rng> {
    rngs: Vec<R>,
    dims: usize,
}

impl<R: Rng> RowStreams<R> {
    pub fn new(rngs: Vec<R>, dims: usize) -> Self {
        Self { rngs, dims }
    }

    pub fn rows(&self) -> usize {
        self.rngs.len()
    }

    /// `[rows × dims]` standard normals, row `r` drawn from stream `r`.
    pub fn draw(&mut self) -> Tensor {
        let mut data = Vec::with_capacity(self.rngs.len() * self.dims);
        for rng in &mut self.rngs {
            for _ in 0..self.dims {
                data.push(normal(rng));
            }
        }
        Tensor::matrix(self.rngs.len(), self.dims, data)
    }
}

/// Options for [`sample_chain`].
#[derive(Debug, Clone)]
pub struct ChainOptions {
    pub sharing: NoiseSharing,
    /// Levels to integrate; inactive levels still consume their draws.
    pub active: Vec<bool>,
}

/// Runs the reverse chain from `n = N` to 1 for every active level.
///
/// Draw order per row: one initial latent per level, then for each `n > 1`
/// either one shared `z` or one `z` per level. The observer sees each level's
/// latent after step `n`, i.e. `x_{n−1}`.
pub fn sample_chain<P, R>(
    predictor: &P,
    schedules: &[GranularitySchedule],
    hidden: &[Tensor],
    streams: &mut RowStreams<R>,
    opts: &ChainOptions,
    observer: &mut dyn FnMut(usize, usize, &Tensor),
) -> Result<Vec<Option<Tensor>>>
where
    P: NoisePredictor,
    R: Rng,
{
    let levels = schedules.len();
    if hidden.len() != levels || opts.active.len() != levels {
        return Err(Error::invalid("one hidden state and activity flag per level required"));
    }
    let steps = schedules[0].steps();
    let mut latents: Vec<Tensor> = (0..levels).map(|_| streams.draw()).collect();
    let zero = Tensor::zeros(latents[0].shape());

    for n in (1..=steps).rev() {
        let shared = (n > 1 && opts.sharing == NoiseSharing::Shared).then(|| streams.draw());
        for g in 0..levels {
            let own = (n > 1 && opts.sharing == NoiseSharing::PerGranularity).then(|| streams.draw());
            if !opts.active[g] {
                continue;
            }
            let z = shared.as_ref().or(own.as_ref()).unwrap_or(&zero);
            latents[g] = reverse_step(&latents[g], n, &hidden[g], &schedules[g], predictor, z)?;
            observer(n, g, &latents[g]);
        }
    }
    Ok(latents
        .into_iter()
        .zip(&opts.active)
        .map(|(x, &on)| on.then_some(x))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{rng_normal, rng_stream};
    use crate::schedule::{derive_gran_schedule, linear_beta_schedule, ScheduleSpec};

    /// Predicts a fixed tensor regardless of input.
    struct Fixed(Tensor);

    impl NoisePredictor for Fixed {
        fn predict(&self, x_n: &Tensor, _n: usize, _h: &Tensor) -> Tensor {
            self.0.clone().reshape(&[x_n.rows(), x_n.cols()]).unwrap()
        }
    }

    fn gs(n_star: usize) -> GranularitySchedule {
        derive_gran_schedule(&linear_beta_schedule(10, 0.01, 0.2).unwrap(), n_star).unwrap()
    }

    #[test]
    fn frozen_steps_return_x0() {
        let g = gs(4);
        let x0 = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let eps = Tensor::vector(vec![0.3, 0.3, -1.0]);
        for n in 1..4 {
            assert_eq!(forward_noise(&x0, n, &g, &eps).unwrap(), x0);
        }
        assert_ne!(forward_noise(&x0, 4, &g, &eps).unwrap(), x0);
    }

    #[test]
    fn zero_signal_is_scaled_noise() {
        let g = gs(1);
        let x0 = Tensor::zeros(&[3]);
        let eps = Tensor::vector(vec![0.3, 0.3, -1.0]);
        let out = forward_noise(&x0, 6, &g, &eps).unwrap();
        let sb = g.b(6).sqrt();
        assert_eq!(out.data(), &[sb * 0.3, sb * 0.3, -sb]);
        assert!(forward_noise(&x0, 0, &g, &eps).is_err());
        assert!(forward_noise(&x0, 11, &g, &eps).is_err());
    }

    #[test]
    fn perfect_and_zero_predictors() {
        let g = gs(1);
        let x0 = Tensor::vector(vec![1.0, 2.0]);
        let eps = Tensor::vector(vec![0.5, -1.5]);
        let h = Tensor::zeros(&[1, 3]);
        let perfect = guidance_loss_term(&x0, 5, &h, &eps, &g, &Fixed(eps.clone()), MaskMode::Mask).unwrap();
        assert_eq!(perfect, LossTerm::Value(0.0));
        let zero = guidance_loss_term(&x0, 5, &h, &eps, &g, &Fixed(Tensor::zeros(&[2])), MaskMode::Mask).unwrap();
        assert_eq!(zero, LossTerm::Value((0.25 + 2.25) / 2.0));
    }

    #[test]
    fn zero_predictor_loss_expectation_is_one() {
        let g = gs(1);
        let mut rng = rng_stream(11).rng(0);
        let eps = rng_normal(&mut rng, &[4000, 4]);
        let x0 = Tensor::zeros(&[4000, 4]);
        let h = Tensor::zeros(&[4000, 1]);
        let v = guidance_loss_term(&x0, 3, &h, &eps, &g, &Fixed(Tensor::zeros(&[4000, 4])), MaskMode::Mask)
            .unwrap()
            .value_or_zero();
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn mask_modes() {
        let g = gs(4);
        let x0 = Tensor::vector(vec![1.0]);
        let eps = Tensor::vector(vec![0.5]);
        let h = Tensor::zeros(&[1, 1]);
        let p = Fixed(Tensor::zeros(&[1]));
        assert_eq!(guidance_loss_term(&x0, 3, &h, &eps, &g, &p, MaskMode::Mask).unwrap(), LossTerm::Masked);
        assert_eq!(
            guidance_loss_term(&x0, 3, &h, &eps, &g, &p, MaskMode::Unmasked).unwrap(),
            LossTerm::Value(0.25)
        );
    }

    #[test]
    fn weighted_sum_of_levels() {
        // Zero predictor: L = ‖ε‖²/D. Choose ε so L^(1) = 2 and L^(2) = 4.
        let base = linear_beta_schedule(10, 0.01, 0.2).unwrap();
        let scheds = vec![derive_gran_schedule(&base, 1).unwrap(), derive_gran_schedule(&base, 3).unwrap()];
        let lvl = |e: f64| LevelInput {
            x0: Tensor::vector(vec![0.0]),
            hidden: Tensor::zeros(&[1, 1]),
            eps: Tensor::vector(vec![e]),
        };
        let p = Fixed(Tensor::zeros(&[1]));
        let levels = [lvl(2f64.sqrt()), lvl(2.0)];
        let r = final_loss(&levels, 5, &[0.9, 0.1], &scheds, &p, MaskMode::Mask).unwrap();
        assert!((r.total - 2.2).abs() < 1e-12);
        assert_eq!(r.masked, 0);

        let r = final_loss(&levels, 1, &[0.9, 0.1], &scheds, &p, MaskMode::Mask).unwrap();
        assert_eq!(r.masked, 1);
        assert_eq!(r.per_granularity[1], None);
        assert!((r.total - 0.9 * 2.0).abs() < 1e-12);

        assert!(final_loss(&levels, 5, &[0.9, 0.2], &scheds, &p, MaskMode::Mask).is_err());
    }

    #[test]
    fn frozen_reverse_step_is_identity() {
        let g = gs(5);
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::full(&[2, 2], 9.0);
        let p = Fixed(Tensor::full(&[4], 1.0));
        let h = Tensor::zeros(&[2, 1]);
        for n in 1..5 {
            assert_eq!(reverse_step(&x, n, &h, &g, &p, &z).unwrap(), x);
        }
    }

    #[test]
    fn final_step_is_deterministic_with_zero_noise() {
        let base = ScheduleSpec::from_betas(vec![0.1, 0.2]).unwrap();
        let g = derive_gran_schedule(&base, 1).unwrap();
        let x = Tensor::vector(vec![0.7]);
        let p = Fixed(Tensor::vector(vec![0.2]));
        let h = Tensor::zeros(&[1, 1]);
        let out = reverse_step(&x, 1, &h, &g, &p, &Tensor::vector(vec![0.0])).unwrap();
        let expected = (0.7 - 0.1 / (0.1f64).sqrt() * 0.2) / 0.9f64.sqrt();
        assert!((out.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn chain_determinism_and_frozen_tail() {
        let base = linear_beta_schedule(8, 0.01, 0.3).unwrap();
        let scheds = vec![derive_gran_schedule(&base, 1).unwrap(), derive_gran_schedule(&base, 4).unwrap()];
        let p = Fixed(Tensor::full(&[6], 0.1));
        let hidden = vec![Tensor::zeros(&[3, 1]), Tensor::zeros(&[3, 1])];
        let run = || {
            let rngs = (0..3).map(|r| rng_stream(5).rng(r)).collect();
            let mut streams = RowStreams::new(rngs, 2);
            let mut coarse = Vec::new();
            let out = sample_chain(
                &p,
                &scheds,
                &hidden,
                &mut streams,
                &ChainOptions {
                    sharing: NoiseSharing::Shared,
                    active: vec![true, true],
                },
                &mut |n, g, x| {
                    if g == 1 && n < 4 {
                        coarse.push(x.clone());
                    }
                },
            )
            .unwrap();
            (out, coarse)
        };
        let (a, coarse) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(coarse.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(coarse.last(), a[1].as_ref());
    }

    #[test]
    fn inactive_levels_do_not_change_active_ones() {
        let base = linear_beta_schedule(8, 0.01, 0.3).unwrap();
        let scheds = vec![derive_gran_schedule(&base, 1).unwrap(), derive_gran_schedule(&base, 4).unwrap()];
        let p = Fixed(Tensor::full(&[4], 0.1));
        let hidden = vec![Tensor::zeros(&[2, 1]), Tensor::zeros(&[2, 1])];
        for sharing in [NoiseSharing::Shared, NoiseSharing::PerGranularity] {
            let run = |active: Vec<bool>| {
                let rngs = (0..2).map(|r| rng_stream(5).rng(r)).collect();
                let mut streams = RowStreams::new(rngs, 2);
                sample_chain(&p, &scheds, &hidden, &mut streams, &ChainOptions { sharing, active }, &mut |_, _, _| {})
                    .unwrap()
            };
            let both = run(vec![true, true]);
            let fine = run(vec![true, false]);
            assert_eq!(both[0], fine[0]);
            assert!(fine[1].is_none());
        }
    }
}
