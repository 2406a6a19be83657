//! Base variance schedule and per-granularity truncated schedules.
//!
//! Steps are 1-based throughout the public API (`n ∈ 1..=N`), matching the
//! usual diffusion notation. Level `g` starts sharing the base schedule at
//! step `N_*`: steps `n < N_*` are frozen (`α = 1`), steps `n ≥ N_*` reuse
//! the base `α_n`, so exactly `N − N_* + 1 = r·N` steps are shared.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl ScheduleSpec {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::invalid("a schedule needs at least two steps"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = running_product(&alphas);
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alphas[n - 1]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bars[n - 1]
    }

    /// Plain schedule made of steps `from..=N`, re-indexed from 1.
    pub fn tail(&self, from: usize) -> Result<ScheduleSpec> {
        if from == 0 || from > self.steps() - 1 {
            return Err(Error::invalid(format!("tail start {from} out of range")));
        }
        ScheduleSpec::from_betas(self.betas[from - 1..].to_vec())
    }
}

fn running_product(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(1.0, |acc, &v| {
            *acc *= v;
            Some(*acc)
        })
        .collect()
}

/// β linearly interpolated from `beta_start` to `beta_end`, endpoints included.
pub fn linear_beta_schedule(n: usize, beta_start: f64, beta_end: f64) -> Result<ScheduleSpec> {
    if n < 2 {
        return Err(Error::invalid("schedule length must be at least 2"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = (0..n)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64)
        .collect();
    ScheduleSpec::from_betas(betas)
}

/// Start index for share ratio `r`: `round(N·(1 − r)) + 1` (half rounds up),
/// clamped to `[1, N]`.
pub fn share_ratio_to_index(r: f64, n: usize) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::invalid(format!("share ratio {r} outside (0, 1]")));
    }
    let raw = (n as f64 * (1.0 - r) + 0.5).floor() as usize + 1;
    Ok(raw.clamp(1, n))
}

/// `r = 1 − (N_* − 1)/N`.
pub fn index_to_share_ratio(n_star: usize, n: usize) -> f64 {
    1.0 - (n_star as f64 - 1.0) / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularitySchedule {
    pub n_star: usize,
    pub share_ratio: f64,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `a_n = Π_{k≤n} α_k`
    pub a: Vec<f64>,
    /// `b_n = 1 − a_n`
    pub b: Vec<f64>,
}

impl GranularitySchedule {
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alphas[n - 1]
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    pub fn a(&self, n: usize) -> f64 {
        self.a[n - 1]
    }

    pub fn b(&self, n: usize) -> f64 {
        self.b[n - 1]
    }

    /// `a_{n-1}` with the empty product `a_0 = 1`.
    pub fn a_prev(&self, n: usize) -> f64 {
        if n <= 1 {
            1.0
        } else {
            self.a[n - 2]
        }
    }

    /// True while the level is still clean at step `n` (no noise injected).
    pub fn is_frozen(&self, n: usize) -> bool {
        n < self.n_star
    }

    /// Posterior variance `σ_n = (1 − a_{n−1})/(1 − a_n)·β_n`, zero on frozen steps.
    pub fn sigma(&self, n: usize) -> f64 {
        let beta = self.beta(n);
        if beta == 0.0 {
            return 0.0;
        }
        (1.0 - self.a_prev(n)) / (1.0 - self.a(n)) * beta
    }
}

pub fn derive_gran_schedule(base: &ScheduleSpec, n_star: usize) -> Result<GranularitySchedule> {
    let n = base.steps();
    if n_star == 0 || n_star > n {
        return Err(Error::invalid(format!("N_* = {n_star} outside [1, {n}]")));
    }
    let alphas: Vec<f64> = base
        .alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| if i + 1 < n_star { 1.0 } else { a })
        .collect();
    let betas = alphas.iter().map(|a| 1.0 - a).collect();
    let a = running_product(&alphas);
    let b = a.iter().map(|v| 1.0 - v).collect();
    Ok(GranularitySchedule {
        n_star,
        share_ratio: index_to_share_ratio(n_star, n),
        alphas,
        betas,
        a,
        b,
    })
}

/// Schedules for every level from their share ratios. Start indices must be
/// strictly increasing and the finest ratio must be 1.
pub fn schedules_from_ratios(base: &ScheduleSpec, ratios: &[f64]) -> Result<Vec<GranularitySchedule>> {
    let n = base.steps();
    let starts = ratios
        .iter()
        .map(|&r| share_ratio_to_index(r, n))
        .collect::<Result<Vec<_>>>()?;
    if starts.first() != Some(&1) {
        return Err(Error::config("the finest granularity must have share ratio 1"));
    }
    for pair in starts.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::config(format!(
                "share ratios must map to strictly increasing start steps, got {starts:?}"
            )));
        }
    }
    starts.iter().map(|&s| derive_gran_schedule(base, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base4() -> ScheduleSpec {
        ScheduleSpec::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    #[test]
    fn two_step_linear() {
        let s = linear_beta_schedule(2, 0.1, 0.3).unwrap();
        assert_eq!(s.betas, vec![0.1, 0.3]);
        assert_eq!(s.alphas, vec![0.9, 0.7]);
        assert!((s.alpha_bars[1] - 0.63).abs() < 1e-15);
        assert!(s.alpha_bar(2) < s.alpha_bar(1));
    }

    #[test]
    fn linear_rejects_bad_bounds() {
        assert!(linear_beta_schedule(1, 0.1, 0.2).is_err());
        assert!(linear_beta_schedule(10, 0.0, 0.2).is_err());
        assert!(linear_beta_schedule(10, 0.3, 0.2).is_err());
        assert!(linear_beta_schedule(10, 0.1, 1.0).is_err());
        assert!(linear_beta_schedule(100, 1e-4, 0.1).is_ok());
    }

    #[test]
    fn ratio_inversion() {
        assert_eq!(share_ratio_to_index(0.8, 100).unwrap(), 21);
        assert_eq!(share_ratio_to_index(0.2, 100).unwrap(), 81);
        assert_eq!(share_ratio_to_index(1.0, 100).unwrap(), 1);
        assert_eq!(share_ratio_to_index(0.8, 50).unwrap(), 11);
        assert!(share_ratio_to_index(0.0, 100).is_err());
        assert!(share_ratio_to_index(-0.5, 100).is_err());
        // very small ratios clamp to N
        assert_eq!(share_ratio_to_index(0.001, 100).unwrap(), 100);
    }

    #[test]
    fn truncated_schedule_products() {
        let g = derive_gran_schedule(&base4(), 3).unwrap();
        assert_eq!(g.alphas, vec![1.0, 1.0, 0.7, 0.6]);
        assert_eq!(g.a[0], 1.0);
        assert_eq!(g.a[1], 1.0);
        assert!((g.a[2] - 0.7).abs() < 1e-15);
        assert!((g.a[3] - 0.42).abs() < 1e-15);
        assert_eq!(g.b[0], 0.0);
        assert!((g.b[3] - 0.58).abs() < 1e-15);
        assert!((g.share_ratio - 0.5).abs() < 1e-15);
    }

    #[test]
    fn finest_level_is_base() {
        let base = base4();
        let g = derive_gran_schedule(&base, 1).unwrap();
        assert_eq!(g.a, base.alpha_bars);
        assert_eq!(g.share_ratio, 1.0);
    }

    #[test]
    fn maximal_truncation() {
        let base = base4();
        let g = derive_gran_schedule(&base, 4).unwrap();
        assert_eq!(&g.a[..3], &[1.0, 1.0, 1.0]);
        assert_eq!(g.a[3], base.alpha(4));
        assert!(derive_gran_schedule(&base, 5).is_err());
        assert!(derive_gran_schedule(&base, 0).is_err());
    }

    #[test]
    fn sigma_plugin() {
        let base = ScheduleSpec::from_betas(vec![0.1, 0.2]).unwrap();
        let g = derive_gran_schedule(&base, 1).unwrap();
        let expected = (1.0 - 0.9) / (1.0 - 0.72) * 0.2;
        assert!((g.sigma(2) - expected).abs() < 1e-15);
        assert_eq!(g.sigma(1), 0.0);
    }

    #[test]
    fn ratios_must_increase_start() {
        let base = linear_beta_schedule(50, 1e-4, 0.1).unwrap();
        assert!(schedules_from_ratios(&base, &[1.0, 0.8]).is_ok());
        assert!(schedules_from_ratios(&base, &[1.0, 0.8, 0.8]).is_err());
        assert!(schedules_from_ratios(&base, &[0.9, 0.8]).is_err());
        assert!(schedules_from_ratios(&base, &[1.0, 0.6, 0.8]).is_err());
    }
}
