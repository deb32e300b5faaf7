//! Sinusoidal time embeddings added to window embeddings, scaled so every
//! added component stays below a multiple of the embeddings' spread.

use serde::{Deserialize, Serialize};

use crate::encoder::Embedding;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeAttachMode {
    None,
    /// Position = window index from the start of the record.
    FullSequence,
    /// Position 0 for every prebleed window, then windows since bleed start.
    FromBleedStart,
}

impl std::str::FromStr for TimeAttachMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "full" | "full_sequence" => Ok(Self::FullSequence),
            "from-bleed" | "from_bleed" | "from_bleed_start" => Ok(Self::FromBleedStart),
            other => Err(Error::InvalidConfig(format!(
                "unknown time attach mode `{other}`"
            ))),
        }
    }
}

/// Keeps the largest added component strictly under `scale_factor * sigma`.
const BOUND_MARGIN: f64 = 1.0 - 1e-9;

/// Component `2i` is `sin(pos / 10000^(2i/dim))`, component `2i+1` the
/// matching cosine.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "time embedding dimension {dim} must be even"
        )));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = position / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttachReport {
    /// Standard deviation over every component of every input embedding.
    pub sigma_global: f64,
    /// Multiplier applied to the raw positional vectors.
    pub scale: f64,
    pub positions: Vec<f64>,
}

/// Per-window positions for `mode`, following the input order. Windows of a
/// subject must be contiguous and time-ordered.
pub fn positions(embeddings: &[Embedding], mode: TimeAttachMode) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(embeddings.len());
    let mut i = 0;
    while i < embeddings.len() {
        let subject = &provenance(&embeddings[i])?.subject_id;
        let mut j = i;
        while j < embeddings.len() && &provenance(&embeddings[j])?.subject_id == subject {
            j += 1;
        }
        let group = &embeddings[i..j];
        let first_bleed = group
            .iter()
            .position(|e| {
                e.provenance
                    .as_ref()
                    .is_some_and(|p| p.seconds_from_bleed >= 0.0)
            })
            .unwrap_or(group.len());
        for (idx, _) in group.iter().enumerate() {
            out.push(match mode {
                TimeAttachMode::None => 0.0,
                TimeAttachMode::FullSequence => idx as f64,
                TimeAttachMode::FromBleedStart => idx.saturating_sub(first_bleed) as f64,
            });
        }
        i = j;
    }
    Ok(out)
}

fn provenance(e: &Embedding) -> Result<&crate::encoder::Provenance> {
    e.provenance
        .as_ref()
        .ok_or_else(|| Error::Precondition("time attachment needs window provenance".into()))
}

/// Adds scaled sinusoidal position vectors. The scale is
/// `scale_factor * sigma_global / max|component|` (shrunk by a relative
/// 1e-9), so no added component reaches `scale_factor * sigma_global`.
pub fn attach_time(
    embeddings: &[Embedding],
    mode: TimeAttachMode,
    scale_factor: f64,
) -> Result<(Vec<Embedding>, AttachReport)> {
    if embeddings.is_empty() {
        return Err(Error::Precondition(
            "no embeddings to attach time to".into(),
        ));
    }
    let dim = embeddings[0].values.len();
    if embeddings.iter().any(|e| e.values.len() != dim) {
        return Err(Error::Shape("embeddings have different dimensions".into()));
    }
    let count = (embeddings.len() * dim) as f64;
    let mean = embeddings.iter().flat_map(|e| &e.values).sum::<f64>() / count;
    let sigma_global = (embeddings
        .iter()
        .flat_map(|e| &e.values)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count)
        .sqrt();

    if mode == TimeAttachMode::None {
        return Ok((
            embeddings.to_vec(),
            AttachReport {
                sigma_global,
                scale: 0.0,
                positions: vec![0.0; embeddings.len()],
            },
        ));
    }
    let pos = positions(embeddings, mode)?;
    let vectors: Vec<Vec<f64>> = pos
        .iter()
        .map(|&p| sinusoidal_embedding(p, dim))
        .collect::<Result<_>>()?;
    let max_mag = vectors.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max_mag > 0.0 {
        scale_factor * sigma_global / max_mag * BOUND_MARGIN
    } else {
        0.0
    };
    let out = embeddings
        .iter()
        .zip(&vectors)
        .map(|(e, v)| Embedding {
            values: e.values.iter().zip(v).map(|(x, t)| x + scale * t).collect(),
            provenance: e.provenance.clone(),
        })
        .collect();
    Ok((
        out,
        AttachReport {
            sigma_global,
            scale,
            positions: pos,
        },
    ))
}
