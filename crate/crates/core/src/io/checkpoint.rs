//! Binary checkpoints.
//!
//! ```text
//! "MGTSD\0" | version: u16 LE | header_len: u32 LE | header (JSON) | payload
//! ```
//!
//! The header echoes the configuration, stores every schedule array as
//! decimal strings and lists each tensor's name, shape and byte offset into
//! the payload. Tensors are little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::MgTsd;
use crate::numeric::{ParamStore, Tensor};
use crate::schedule::{GranularitySchedule, ScheduleSpec};

pub const MAGIC: &[u8; 6] = b"MGTSD\0";
pub const VERSION: u16 = 1;
const PREAMBLE: usize = 6 + 2 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredBase {
    betas: Vec<String>,
    alphas: Vec<String>,
    alpha_bars: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredLevel {
    n_star: usize,
    share_ratio: String,
    alphas: Vec<String>,
    betas: Vec<String>,
    a: Vec<String>,
    b: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    input_dim: usize,
    train: TrainConfig,
    model: ModelConfig,
    schedule: StoredBase,
    granularity_schedules: Vec<StoredLevel>,
    tensors: Vec<TensorEntry>,
}

fn strings(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:?}")).collect()
}

fn floats(v: &[String]) -> Result<Vec<f64>> {
    v.iter()
        .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad number `{s}` in header"))))
        .collect()
}

/// Serialized checkpoint bytes.
pub fn checkpoint_bytes(model: &MgTsd) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut payload = Vec::with_capacity(model.params.num_values() * 4);
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        input_dim: model.input_dim,
        train: model.train.clone(),
        model: model.model.clone(),
        schedule: StoredBase {
            betas: strings(&model.base.betas),
            alphas: strings(&model.base.alphas),
            alpha_bars: strings(&model.base.alpha_bars),
        },
        granularity_schedules: model
            .schedules
            .iter()
            .map(|g| StoredLevel {
                n_star: g.n_star,
                share_ratio: format!("{:?}", g.share_ratio),
                alphas: strings(&g.alphas),
                betas: strings(&g.betas),
                a: strings(&g.a),
                b: strings(&g.b),
            })
            .collect(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses checkpoint bytes. Nothing is returned unless every check passes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<MgTsd> {
    if bytes.len() < PREAMBLE || &bytes[..6] != MAGIC {
        return Err(Error::Checkpoint("not an mgtsd checkpoint".into()));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut spans: Vec<(usize, usize, &TensorEntry)> = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let end = count
            .checked_mul(4)
            .and_then(|n| entry.offset.checked_add(n))
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` lies outside the payload", entry.name)))?;
        spans.push((entry.offset, end, entry));
    }
    spans.sort_by_key(|s| s.0);
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Checkpoint(format!(
                "tensors `{}` and `{}` overlap",
                pair[0].2.name, pair[1].2.name
            )));
        }
    }
    if spans.last().map_or(0, |s| s.1) != payload.len() {
        return Err(Error::Checkpoint("payload length does not match the manifest".into()));
    }

    let mut params = ParamStore::new();
    for (start, end, entry) in &spans {
        let data = payload[*start..*end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(&entry.shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if params.contains(&entry.name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", entry.name)));
        }
        params.insert(entry.name.clone(), t);
    }

    let base = ScheduleSpec {
        betas: floats(&header.schedule.betas)?,
        alphas: floats(&header.schedule.alphas)?,
        alpha_bars: floats(&header.schedule.alpha_bars)?,
    };
    let schedules = header
        .granularity_schedules
        .iter()
        .map(|g| {
            Ok(GranularitySchedule {
                n_star: g.n_star,
                share_ratio: g
                    .share_ratio
                    .parse()
                    .map_err(|_| Error::Checkpoint("bad share ratio in header".into()))?,
                alphas: floats(&g.alphas)?,
                betas: floats(&g.betas)?,
                a: floats(&g.a)?,
                b: floats(&g.b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = MgTsd::from_parts(header.train, header.model, header.input_dim, base, schedules, params)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected = MgTsd::new(model.train.clone(), model.model.clone(), model.input_dim)?;
    if expected.base != model.base || expected.schedules != model.schedules {
        return Err(Error::Checkpoint("stored schedules disagree with the configuration".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &MgTsd) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MgTsd> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MgTsd {
        let cfg = ModelConfig {
            hidden_size: 4,
            gru_layers: 2,
            denoiser_width: 8,
            denoiser_blocks: 1,
            step_embedding_dim: 4,
            ..ModelConfig::default()
        };
        MgTsd::new(TrainConfig::desk_scale(), cfg, 3).unwrap()
    }

    #[test]
    fn save_load_save_identical() {
        let m = model();
        let first = checkpoint_bytes(&m).unwrap();
        let loaded = checkpoint_from_bytes(&first).unwrap();
        let second = checkpoint_bytes(&loaded).unwrap();
        assert_eq!(first, second);
        assert_eq!(loaded.train, m.train);
        assert_eq!(loaded.model, m.model);
        assert_eq!(loaded.schedules, m.schedules);
        for (name, t) in m.params.iter() {
            let back = loaded.params.get(name).unwrap();
            for (a, b) in t.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= a.abs() * f32::EPSILON as f64);
            }
        }
    }

    #[test]
    fn truncation_and_version() {
        let bytes = checkpoint_bytes(&model()).unwrap();
        for cut in [0, 5, 11, 40, bytes.len() - 1] {
            assert!(checkpoint_from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[6] = 9;
        let err = checkpoint_from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let mut extra = bytes;
        extra.push(0);
        assert!(checkpoint_from_bytes(&extra).is_err());
    }
}
