//! JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticKind;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::granularity::{GranularitySpec, Smoother};
use crate::metrics::{CrpsMethod, PointForecast};

/// A window given either in ticks or as a duration label such as `"4h"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WindowSize {
    Ticks(usize),
    Label(String),
}

/// Length of a duration label in seconds. Units: `s`, `min`, `h`, `d`, `w`.
pub fn parse_duration(label: &str) -> Result<u64> {
    let label = label.trim();
    let split = label
        .find(|c: char| !c.is_ascii_digit())
        .ok_or_else(|| Error::config(format!("duration `{label}` has no unit")))?;
    let (num, unit) = label.split_at(split);
    let count: u64 = if num.is_empty() {
        1
    } else {
        num.parse().map_err(|_| Error::config(format!("bad duration `{label}`")))?
    };
    let unit_secs = match unit {
        "s" => 1,
        "min" | "m" => 60,
        "h" => 3600,
        "d" => 86_400,
        "w" => 604_800,
        _ => return Err(Error::config(format!("unknown duration unit in `{label}`"))),
    };
    if count == 0 {
        return Err(Error::config(format!("duration `{label}` is zero")));
    }
    Ok(count * unit_secs)
}

impl WindowSize {
    pub fn ticks(&self, frequency: &str) -> Result<usize> {
        match self {
            WindowSize::Ticks(n) => Ok(*n),
            WindowSize::Label(l) => {
                let (span, tick) = (parse_duration(l)?, parse_duration(frequency)?);
                if span % tick != 0 {
                    return Err(Error::config(format!(
                        "window `{l}` is not a whole number of `{frequency}` ticks"
                    )));
                }
                Ok((span / tick) as usize)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GranularityEntry {
    pub window: WindowSize,
    pub weight: f64,
    #[serde(default)]
    pub smoother: Smoother,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub kind: SyntheticKind,
    pub length: usize,
    pub dims: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::SinusoidMixture,
            length: 2000,
            dims: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSection {
    /// Defaults to the trained prediction length.
    pub horizon: Option<usize>,
    pub num_samples: usize,
    pub include_coarse: bool,
    /// Forecast after this many rows of the dataset; defaults to all rows.
    pub context_end: Option<usize>,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            horizon: None,
            num_samples: 100,
            include_coarse: false,
            context_end: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub num_windows: usize,
    pub num_samples: usize,
    pub crps: CrpsMethod,
    pub point: PointForecast,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            num_windows: 5,
            num_samples: 100,
            crps: CrpsMethod::Exact,
            point: PointForecast::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    pub windows: Vec<WindowSize>,
    /// Empty means every diffusion step.
    pub step_grid: Vec<usize>,
    pub num_windows: usize,
    pub num_samples: usize,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            windows: vec![WindowSize::Ticks(4), WindowSize::Ticks(12)],
            step_grid: Vec::new(),
            num_windows: 5,
            num_samples: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Duration of one tick, used to resolve window labels.
    pub frequency: String,
    pub workers: Option<usize>,
    /// Overrides `train.granularities` when present.
    pub granularities: Option<Vec<GranularityEntry>>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub generate: GenerateSection,
    pub forecast: ForecastSection,
    pub evaluate: EvaluateSection,
    pub select: SelectSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out_dir: None,
            frequency: "1h".into(),
            workers: None,
            granularities: None,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            generate: GenerateSection::default(),
            forecast: ForecastSection::default(),
            evaluate: EvaluateSection::default(),
            select: SelectSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses, resolves window labels and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    fn resolve(&mut self) -> Result<()> {
        parse_duration(&self.frequency)?;
        if let Some(entries) = &self.granularities {
            self.train.granularities = entries
                .iter()
                .map(|e| {
                    Ok(GranularitySpec {
                        window: e.window.ticks(&self.frequency)?,
                        smoother: e.smoother,
                        weight: e.weight,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.select_windows()?;
        if self.workers == Some(0) {
            return Err(Error::config("workers must be at least 1"));
        }
        Ok(())
    }

    pub fn select_windows(&self) -> Result<Vec<usize>> {
        self.select.windows.iter().map(|w| w.ticks(&self.frequency)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_resolve_to_ticks() {
        let cfg = RunConfig::from_json(
            r#"{"frequency": "1h",
                "granularities": [{"window": "1h", "weight": 0.8}, {"window": "4h", "weight": 0.1},
                                  {"window": 12, "weight": 0.1}],
                "train": {"share_ratios": [1.0, 0.8, 0.6]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.windows(), vec![1, 4, 12]);
        assert_eq!(WindowSize::Label("1d".into()).ticks("30min").unwrap(), 48);
        assert!(WindowSize::Label("90min".into()).ticks("1h").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epochz": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"evaluate": {"num_windows": 2, "x": 1}}"#).is_err());
        assert!(RunConfig::from_json("{}").is_ok());
    }

    #[test]
    fn durations() {
        assert_eq!(parse_duration("15min").unwrap(), 900);
        assert_eq!(parse_duration("h").unwrap(), 3600);
        assert!(parse_duration("4").is_err());
        assert!(parse_duration("0h").is_err());
        assert!(parse_duration("3y").is_err());
    }
}
