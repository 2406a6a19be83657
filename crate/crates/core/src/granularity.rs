//! Coarse-grained, timeline-aligned targets built from the finest series.
//!
//! Level `g` averages non-overlapping blocks of `s^g` ticks and writes each
//! block's value back to every position of the block, so all levels keep the
//! finest length `T`. A trailing partial block is averaged over its actual
//! length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Reduction applied to each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoother {
    #[default]
    Mean,
}

impl Smoother {
    fn reduce(self, values: impl Iterator<Item = f64>) -> f64 {
        match self {
            Smoother::Mean => {
                let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                sum / n as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularitySpec {
    /// Block length in finest-grain ticks.
    pub window: usize,
    #[serde(default)]
    pub smoother: Smoother,
    /// Loss weight ω^g.
    pub weight: f64,
}

impl GranularitySpec {
    pub fn new(window: usize, weight: f64) -> Self {
        Self {
            window,
            smoother: Smoother::Mean,
            weight,
        }
    }
}

/// Smooths a `[T × D]` matrix over blocks of `s` rows.
pub fn smooth(fine: &Tensor, s: usize, f: Smoother) -> Result<Tensor> {
    if s == 0 {
        return Err(Error::invalid("smoothing window must be positive"));
    }
    let (t_len, d) = (fine.rows(), fine.cols());
    let mut out = vec![0.0; t_len * d];
    let mut start = 0;
    while start < t_len {
        let end = (start + s).min(t_len);
        for j in 0..d {
            let v = f.reduce((start..end).map(|t| fine.data()[t * d + j]));
            for t in start..end {
                out[t * d + j] = v;
            }
        }
        start = end;
    }
    Ok(Tensor::matrix(t_len, d, out))
}

/// Aligned stack of granularity levels over a common timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiGranSeries {
    pub levels: Vec<Tensor>,
    pub windows: Vec<usize>,
}

impl MultiGranSeries {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn len(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.levels[0].cols()
    }

    pub fn level(&self, g: usize) -> &Tensor {
        &self.levels[g]
    }

    /// Index of the first finest-grain tick of the block containing `t`.
    pub fn block_start(&self, g: usize, t: usize) -> usize {
        t - t % self.windows[g]
    }
}

/// Checks window ordering, the finest window, and the weight sum.
pub fn validate_specs(specs: &[GranularitySpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("at least one granularity is required"));
    }
    if specs[0].window != 1 {
        return Err(Error::config("the finest granularity must have window 1"));
    }
    for pair in specs.windows(2) {
        if pair[1].window <= pair[0].window {
            return Err(Error::config(format!(
                "granularity windows must be strictly increasing, got {} then {}",
                pair[0].window, pair[1].window
            )));
        }
    }
    if specs.iter().any(|s| !(0.0..=1.0).contains(&s.weight)) {
        return Err(Error::config("loss weights must lie in [0, 1]"));
    }
    let total: f64 = specs.iter().map(|s| s.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("loss weights sum to {total}, expected 1")));
    }
    Ok(())
}

pub fn build_multigran(fine: &Tensor, specs: &[GranularitySpec]) -> Result<MultiGranSeries> {
    if specs.is_empty() || specs[0].window != 1 {
        return Err(Error::invalid("the first granularity must have window 1"));
    }
    for pair in specs.windows(2) {
        if pair[1].window <= pair[0].window {
            return Err(Error::invalid(format!(
                "granularity windows must be sorted and distinct, got {} then {}",
                pair[0].window, pair[1].window
            )));
        }
    }
    let levels = specs
        .iter()
        .map(|s| smooth(fine, s.window, s.smoother))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiGranSeries {
        levels,
        windows: specs.iter().map(|s| s.window).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec())
    }

    #[test]
    fn two_block_average() {
        let out = smooth(&col(&[1.0, 2.0, 3.0, 4.0]), 2, Smoother::Mean).unwrap();
        assert_eq!(out.data(), &[1.5, 1.5, 3.5, 3.5]);
    }

    #[test]
    fn identity_window() {
        let x = col(&[0.3, -1.0, 7.0]);
        assert_eq!(smooth(&x, 1, Smoother::Mean).unwrap(), x);
    }

    #[test]
    fn partial_trailing_block() {
        let out = smooth(&col(&[1.0, 2.0, 3.0]), 2, Smoother::Mean).unwrap();
        assert_eq!(out.data(), &[1.5, 1.5, 3.0]);
    }

    #[test]
    fn zero_window_rejected() {
        assert!(smooth(&col(&[1.0]), 0, Smoother::Mean).is_err());
    }

    #[test]
    fn hourly_day_into_four_hour_blocks() {
        let x = col(&(0..24).map(|i| i as f64).collect::<Vec<_>>());
        let mg = build_multigran(&x, &[GranularitySpec::new(1, 0.9), GranularitySpec::new(4, 0.1)]).unwrap();
        let lvl = mg.level(1).data();
        let mut blocks = lvl.to_vec();
        blocks.dedup();
        assert_eq!(blocks.len(), 6);
        assert_eq!(lvl[0], 1.5);
        assert_eq!(lvl[23], 21.5);
        assert_eq!(mg.block_start(1, 10), 8);
    }

    #[test]
    fn single_level_is_input() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mg = build_multigran(&x, &[GranularitySpec::new(1, 1.0)]).unwrap();
        assert_eq!(mg.num_levels(), 1);
        assert_eq!(mg.level(0), &x);
    }

    #[test]
    fn solar_dictionary_accepted() {
        let specs: Vec<_> = [1, 4, 12, 24, 48]
            .iter()
            .zip([0.6, 0.1, 0.1, 0.1, 0.1])
            .map(|(&w, o)| GranularitySpec::new(w, o))
            .collect();
        validate_specs(&specs).unwrap();
        let x = Tensor::matrix(96, 1, (0..96).map(|i| (i as f64).sin()).collect());
        let mg = build_multigran(&x, &specs).unwrap();
        assert_eq!(mg.num_levels(), 5);
        assert!(mg.levels.iter().all(|l| l.shape() == [96, 1]));
    }

    #[test]
    fn unsorted_or_duplicate_windows_rejected() {
        let x = col(&[1.0, 2.0]);
        assert!(build_multigran(&x, &[GranularitySpec::new(1, 0.5), GranularitySpec::new(1, 0.5)]).is_err());
        assert!(build_multigran(
            &x,
            &[GranularitySpec::new(1, 0.4), GranularitySpec::new(4, 0.3), GranularitySpec::new(2, 0.3)]
        )
        .is_err());
        assert!(build_multigran(&x, &[GranularitySpec::new(2, 1.0)]).is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(validate_specs(&[GranularitySpec::new(1, 0.9), GranularitySpec::new(4, 0.2)]).is_err());
        assert!(validate_specs(&[GranularitySpec::new(1, 0.9), GranularitySpec::new(4, 0.1)]).is_ok());
    }
}
