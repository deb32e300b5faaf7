//! Reference / positive / negative subseries sampling for triplet training.
//!
//! Every negative is placed so that it cannot intersect the reference drawn
//! from the same source in the same batch, so a negative can never double as
//! a positive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerScheme {
    /// Negatives may come from any sequence in the batch.
    CrossSubject,
    /// Negatives come from the reference's own sequence.
    WithinSubject,
}

impl std::str::FromStr for SamplerScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" | "cross-subject" | "cross_subject" => Ok(Self::CrossSubject),
            "within" | "within-subject" | "within_subject" => Ok(Self::WithinSubject),
            other => Err(Error::InvalidConfig(format!(
                "unknown sampler scheme `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub min_length: usize,
    /// Upper bound on any sampled length; `None` leaves only the
    /// source-derived caps.
    #[serde(default)]
    pub max_length: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            min_length: 16,
            max_length: None,
        }
    }
}

/// Half-open interval `[start, start + len)` of timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    /// Interval from `first` to `last`, both included.
    pub fn inclusive(first: usize, last: usize) -> Self {
        Self {
            start: first,
            len: last + 1 - first,
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, other: &Span) -> bool {
        other.start >= self.start && other.end() <= self.end()
    }

    pub fn intersects(&self, other: &Span) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

/// A span inside batch sequence `source`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subseries {
    pub source: usize,
    pub span: Span,
}

impl Subseries {
    pub fn extract(&self, sources: &[&Matrix]) -> Matrix {
        sources[self.source].slice_cols(self.span.start, self.span.len)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletItem {
    pub reference: Subseries,
    pub positive: Subseries,
    pub negatives: Vec<Subseries>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletBatch {
    pub items: Vec<TripletItem>,
    pub negatives_per_item: usize,
}

/// Number of starts where a `neg_len` span fits entirely before or entirely
/// after `reference` inside a source of `source_len` steps.
pub fn placement_count(source_len: usize, reference: Span, neg_len: usize) -> usize {
    let (before, after) = placement_split(source_len, reference, neg_len);
    before + after
}

fn placement_split(source_len: usize, reference: Span, neg_len: usize) -> (usize, usize) {
    if neg_len == 0 {
        return (0, 0);
    }
    let gap_before = reference.start;
    let gap_after = source_len.saturating_sub(reference.end());
    let fit = |gap: usize| if gap >= neg_len { gap - neg_len + 1 } else { 0 };
    (fit(gap_before), fit(gap_after))
}

/// Draws a negative span disjoint from `reference`: length uniform over the
/// lengths that still fit, start uniform over the valid placements.
pub fn sample_negative(
    source_len: usize,
    reference: Span,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Span> {
    let max_gap = reference
        .start
        .max(source_len.saturating_sub(reference.end()));
    let hi = cfg.max_length.map_or(max_gap, |m| m.min(max_gap));
    if hi < cfg.min_length {
        return Err(Error::Precondition(format!(
            "no room for a negative of length {} beside reference {reference:?} in a source of {source_len}",
            cfg.min_length
        )));
    }
    let len = rng.random_range(cfg.min_length..=hi);
    Ok(Span::new(
        sample_placement(source_len, reference, len, rng),
        len,
    ))
}

/// Uniform start among the placements counted by [`placement_count`].
pub fn sample_placement(
    source_len: usize,
    reference: Span,
    len: usize,
    rng: &mut impl Rng,
) -> usize {
    let (before, after) = placement_split(source_len, reference, len);
    let r = rng.random_range(0..before + after);
    if r < before {
        r
    } else {
        reference.end() + (r - before)
    }
}

fn sample_reference(source_len: usize, cfg: &SamplerConfig, rng: &mut impl Rng) -> Span {
    let min = cfg.min_length;
    let cap = source_len - min;
    let hi = cfg.max_length.map_or(cap, |m| m.min(cap)).max(min);
    let len = rng.random_range(min..=hi);
    // Starts that leave at least `min` free steps on one side. When the two
    // ranges overlap this is every start.
    let last = source_len - len;
    let low_end = last - min; // after-gap >= min
    let high_start = min; // before-gap >= min
    let start = if high_start <= low_end + 1 {
        rng.random_range(0..=last)
    } else {
        let n_low = low_end + 1;
        let n_high = last + 1 - high_start;
        let r = rng.random_range(0..n_low + n_high);
        if r < n_low {
            r
        } else {
            high_start + (r - n_low)
        }
    };
    Span::new(start, len)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples `N` references and positives and `K * N` negatives, dealt `K` per
/// item in sampling order. `source_lengths[i]` is the length of batch
/// sequence `i`. Item `i` draws from RNG stream `i`, negative `j` from
/// stream `N + j`.
pub fn sample_triplets(
    source_lengths: &[usize],
    negatives: usize,
    scheme: SamplerScheme,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<TripletBatch> {
    let n = source_lengths.len();
    if n == 0 || negatives == 0 {
        return Err(Error::Precondition(
            "need at least one source and one negative".into(),
        ));
    }
    if cfg.min_length == 0 {
        return Err(Error::InvalidConfig("min_length must be at least 1".into()));
    }
    if let Some(m) = cfg.max_length {
        if m < cfg.min_length {
            return Err(Error::InvalidConfig(
                "max_length must be at least min_length".into(),
            ));
        }
    }
    for (i, &len) in source_lengths.iter().enumerate() {
        if len < 2 * cfg.min_length {
            return Err(Error::Precondition(format!(
                "source {i} has {len} steps, needs at least {}",
                2 * cfg.min_length
            )));
        }
    }

    let mut items: Vec<TripletItem> = source_lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let mut rng = stream_rng(seed, i as u64);
            let reference = sample_reference(len, cfg, &mut rng);
            let pos_len = rng.random_range(cfg.min_length..=reference.len);
            let pos_start = rng.random_range(reference.start..=reference.end() - pos_len);
            TripletItem {
                reference: Subseries {
                    source: i,
                    span: reference,
                },
                positive: Subseries {
                    source: i,
                    span: Span::new(pos_start, pos_len),
                },
                negatives: Vec::with_capacity(negatives),
            }
        })
        .collect();

    for j in 0..n * negatives {
        let owner = j / negatives;
        let mut rng = stream_rng(seed, (n + j) as u64);
        let source = match scheme {
            SamplerScheme::CrossSubject => rng.random_range(0..n),
            SamplerScheme::WithinSubject => owner,
        };
        let reference = items[source].reference.span;
        let span = sample_negative(source_lengths[source], reference, cfg, &mut rng)?;
        items[owner].negatives.push(Subseries { source, span });
    }
    Ok(TripletBatch {
        items,
        negatives_per_item: negatives,
    })
}
