//! Multichannel physiological series: ingestion, normalization, windowing and
//! a ground-truth-labeled synthetic generator that follows a controlled
//! hemorrhage protocol (baseline rest, slow bleed, periodic lab draws).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_CHANNELS: [&str; 6] = ["ART", "PAP", "CVP", "ECG", "pleth", "airway"];

/// One subject's multichannel waveform record with protocol annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSeries {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub channels: Vec<String>,
    /// `[num_channels x num_timesteps]`
    pub values: Matrix,
    pub bleed_start_idx: usize,
    pub draw_events: Vec<usize>,
    pub regime_labels: Option<Vec<u32>>,
}

impl SubjectSeries {
    /// Constructs a series and checks every structural invariant.
    pub fn new(
        subject_id: impl Into<String>,
        sample_rate_hz: f64,
        channels: Vec<String>,
        values: Matrix,
        bleed_start_idx: usize,
        draw_events: Vec<usize>,
        regime_labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        let s = Self {
            subject_id: subject_id.into(),
            sample_rate_hz,
            channels,
            values,
            bleed_start_idx,
            draw_events,
            regime_labels,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn num_channels(&self) -> usize {
        self.values.rows()
    }

    pub fn num_timesteps(&self) -> usize {
        self.values.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSeries(format!("{}: {m}", self.subject_id)));
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad(format!(
                "sample rate {} must be positive",
                self.sample_rate_hz
            ));
        }
        if self.num_channels() == 0 || self.num_timesteps() == 0 {
            return bad("series needs at least one channel and one timestep".into());
        }
        if self.channels.len() != self.num_channels() {
            return bad(format!(
                "{} channel names for {} channels",
                self.channels.len(),
                self.num_channels()
            ));
        }
        if !self.values.is_finite() {
            return bad("non-finite sample".into());
        }
        if self.bleed_start_idx >= self.num_timesteps() {
            return bad(format!(
                "bleed_start_idx {} outside [0, {})",
                self.bleed_start_idx,
                self.num_timesteps()
            ));
        }
        if self.draw_events.windows(2).any(|w| w[0] >= w[1]) {
            return bad("draw_events must be strictly increasing".into());
        }
        if let Some(&last) = self.draw_events.last() {
            if last >= self.num_timesteps() {
                return bad(format!("draw event {last} outside the record"));
            }
        }
        if let Some(labels) = &self.regime_labels {
            if labels.len() != self.num_timesteps() {
                return bad(format!(
                    "{} regime labels for {} timesteps",
                    labels.len(),
                    self.num_timesteps()
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion

fn parse_err(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

/// Reads a series CSV. The first line carries `key=value` metadata after a
/// `#`, the second the channel names, then one row per timestep.
pub fn load_series(path: impl AsRef<Path>) -> Result<SubjectSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();

    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, 1, "empty file"))?;
    let meta = header
        .strip_prefix('#')
        .ok_or_else(|| parse_err(path, 1, 1, "metadata line must start with `#`"))?;
    let mut fields = BTreeMap::new();
    for tok in meta.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(path, 1, 1, format!("malformed metadata token `{tok}`")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let take = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| parse_err(path, 1, 1, format!("missing {key}")))
    };
    let subject_id = take("subject_id")?.clone();
    let sample_rate_hz: f64 = take("sample_rate_hz")?
        .parse()
        .map_err(|_| parse_err(path, 1, 1, "sample_rate_hz is not a number"))?;
    let bleed_start_idx: usize = take("bleed_start_idx")?
        .parse()
        .map_err(|_| parse_err(path, 1, 1, "bleed_start_idx is not a non-negative integer"))?;
    let draw_events = match fields.get("draw_events") {
        None => return Err(parse_err(path, 1, 1, "missing draw_events")),
        Some(s) if s.is_empty() => Vec::new(),
        Some(s) => s
            .split(';')
            .map(|x| {
                x.parse::<usize>()
                    .map_err(|_| parse_err(path, 1, 1, format!("bad draw event `{x}`")))
            })
            .collect::<Result<Vec<_>>>()?,
    };

    let names_line = lines
        .next()
        .ok_or_else(|| parse_err(path, 2, 1, "missing channel header"))?;
    let channels: Vec<String> = names_line
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if channels.iter().any(String::is_empty) {
        return Err(parse_err(path, 2, 1, "empty channel name"));
    }
    let c = channels.len();

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); c];
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != c {
            return Err(parse_err(
                path,
                lineno,
                cells.len().min(c) + 1,
                format!("expected {c} columns, found {}", cells.len()),
            ));
        }
        for (j, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                parse_err(path, lineno, j + 1, format!("non-numeric cell `{cell}`"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    lineno,
                    j + 1,
                    format!("non-finite value `{cell}`"),
                ));
            }
            columns[j].push(v);
        }
    }
    let t = columns[0].len();
    let values = Matrix::from_rows(&columns);

    let regime_labels = match fields.get("regime_labels_file") {
        None => None,
        Some(rel) => {
            let lp = path.parent().unwrap_or(Path::new(".")).join(rel);
            Some(load_labels(&lp)?)
        }
    };
    if t == 0 {
        return Err(parse_err(path, 3, 1, "no samples"));
    }
    SubjectSeries::new(
        subject_id,
        sample_rate_hz,
        channels,
        values,
        bleed_start_idx,
        draw_events,
        regime_labels,
    )
}

fn load_labels(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<u32>()
                .map_err(|_| parse_err(path, i + 1, 1, format!("bad regime label `{l}`")))
        })
        .collect()
}

/// Writes a series in the CSV layout read by [`load_series`]. Regime labels,
/// when present, go to a sidecar `<stem>.labels` next to the CSV.
pub fn save_series(series: &SubjectSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let draws: Vec<String> = series.draw_events.iter().map(ToString::to_string).collect();
    write!(
        out,
        "# subject_id={} sample_rate_hz={} bleed_start_idx={} draw_events={}",
        series.subject_id,
        series.sample_rate_hz,
        series.bleed_start_idx,
        draws.join(";")
    )
    .unwrap();
    if let Some(labels) = &series.regime_labels {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("series");
        let name = format!("{stem}.labels");
        write!(out, " regime_labels_file={name}").unwrap();
        let mut body = String::with_capacity(labels.len() * 2);
        for l in labels {
            writeln!(body, "{l}").unwrap();
        }
        let lp = path.parent().unwrap_or(Path::new(".")).join(&name);
        fs::write(&lp, body).map_err(|e| Error::io(&lp, e))?;
    }
    out.push('\n');
    out.push_str(&series.channels.join(","));
    out.push('\n');
    for t in 0..series.num_timesteps() {
        for c in 0..series.num_channels() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{}", series.values.get(c, t)).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Normalization

/// Channels that had zero variance and were only mean-centred.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormalizeReport {
    pub dead_channels: Vec<usize>,
}

impl NormalizeReport {
    pub fn has_warning(&self) -> bool {
        !self.dead_channels.is_empty()
    }
}

/// Z-scores every channel over the full record using the population
/// standard deviation. Annotations are carried over untouched.
pub fn normalize(series: &SubjectSeries) -> Result<(SubjectSeries, NormalizeReport)> {
    if series.num_timesteps() < 2 {
        return Err(Error::Precondition(format!(
            "{}: normalization needs at least 2 timesteps",
            series.subject_id
        )));
    }
    let mut out = series.clone();
    let mut report = NormalizeReport::default();
    let n = series.num_timesteps() as f64;
    for c in 0..series.num_channels() {
        let row = out.values.row_mut(c);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 0.0 && std.is_finite() {
            row.iter_mut().for_each(|v| *v = (*v - mean) / std);
        } else {
            log::warn!(
                "{}: channel {} ({}) has zero variance",
                series.subject_id,
                c,
                series.channels[c]
            );
            row.iter_mut().for_each(|v| *v -= mean);
            report.dead_channels.push(c);
        }
    }
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Windowing

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub subject_id: String,
    pub start_idx: usize,
    pub length: usize,
    /// `[num_channels x length]`
    pub values: Matrix,
    pub seconds_from_bleed: f64,
    pub overlaps_draw: bool,
    /// Most frequent ground-truth regime inside the window (ties go to the
    /// smaller label). Only set for labeled series.
    pub majority_regime: Option<u32>,
}

/// Time-ordered windows, grouped by subject in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Window>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn extend(&mut self, other: WindowSet) {
        self.windows.extend(other.windows);
    }

    /// Distinct subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for w in &self.windows {
            if out.last() != Some(&w.subject_id) && !out.contains(&w.subject_id) {
                out.push(w.subject_id.clone());
            }
        }
        out
    }
}

fn majority(labels: &[u32]) -> u32 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    // BTreeMap iterates ascending, so `>` keeps the smallest label on ties.
    let mut best = (0u32, 0usize);
    for (l, c) in counts {
        if c > best.1 {
            best = (l, c);
        }
    }
    best.0
}

/// Cuts nonoverlapping windows of `length` timesteps starting at index 0.
/// A trailing remainder shorter than `length` is dropped.
pub fn make_windows(series: &SubjectSeries, length: usize) -> Result<WindowSet> {
    if length == 0 {
        return Err(Error::Precondition(
            "window length must be at least 1".into(),
        ));
    }
    let count = series.num_timesteps() / length;
    let windows = (0..count)
        .map(|i| {
            let start = i * length;
            let end = start + length;
            let first_draw = series.draw_events.partition_point(|&d| d < start);
            let overlaps_draw = series.draw_events.get(first_draw).is_some_and(|&d| d < end);
            Window {
                subject_id: series.subject_id.clone(),
                start_idx: start,
                length,
                values: series.values.slice_cols(start, length),
                seconds_from_bleed: (start as f64 - series.bleed_start_idx as f64)
                    / series.sample_rate_hz,
                overlaps_draw,
                majority_regime: series
                    .regime_labels
                    .as_ref()
                    .map(|l| majority(&l[start..end])),
            }
        })
        .collect();
    Ok(WindowSet { windows })
}

// ---------------------------------------------------------------------------
// Synthetic protocol generator

/// Oscillator for one channel. The per-regime vectors are indexed by regime
/// label, so they hold `num_regimes + 1` entries (entry 0 is baseline).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelOscillator {
    pub name: String,
    pub base_frequency_hz: f64,
    pub amplitude: f64,
    pub offset: f64,
    /// Relative weight of the second harmonic.
    #[serde(default)]
    pub harmonic: f64,
    /// Level shift in units of `amplitude`.
    pub mean_shift: Vec<f64>,
    pub amplitude_scale: Vec<f64>,
    pub frequency_scale: Vec<f64>,
    /// Linear drift inside a regime, in units of `amplitude` per minute.
    pub drift_per_minute: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_subjects: usize,
    pub sample_rate_hz: f64,
    pub baseline_minutes: f64,
    pub bleed_minutes: f64,
    pub num_regimes: usize,
    /// Fractions of the bleed duration where the regime changes. Either one
    /// list shared by every subject or one list per subject.
    pub regime_boundaries: Vec<Vec<f64>>,
    pub draw_interval_minutes: f64,
    pub first_draw_minutes: f64,
    pub draw_width_seconds: f64,
    /// Pulse height in units of each channel's amplitude.
    pub draw_artifact_magnitude: f64,
    pub channels: Vec<ChannelOscillator>,
    /// Noise standard deviation in units of each channel's amplitude.
    pub noise_std: f64,
    /// Relative per-subject spread of offsets, amplitudes and frequencies.
    #[serde(default)]
    pub subject_jitter: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Desk-scale protocol: 50 Hz, six channels, `num_regimes` bleed regimes of
    /// escalating severity. The first bleed regime is close to baseline.
    pub fn desk(num_subjects: usize, num_regimes: usize, seed: u64) -> Self {
        let sev: Vec<f64> = (0..=num_regimes)
            .map(|r| (r as f64 / num_regimes.max(1) as f64).powf(1.5))
            .collect();
        let ramp = |end: f64| sev.iter().map(|s| s * end).collect::<Vec<_>>();
        let scale = |end: f64| {
            sev.iter()
                .map(|s| 1.0 + s * (end - 1.0))
                .collect::<Vec<_>>()
        };
        let zeros = vec![0.0; num_regimes + 1];
        let osc = |name: &str, f: f64, a: f64, o: f64, h: f64, shift: f64, amp: f64, freq: f64| {
            ChannelOscillator {
                name: name.into(),
                base_frequency_hz: f,
                amplitude: a,
                offset: o,
                harmonic: h,
                mean_shift: ramp(shift),
                amplitude_scale: scale(amp),
                frequency_scale: scale(freq),
                drift_per_minute: zeros.clone(),
            }
        };
        let channels = vec![
            osc("ART", 1.5, 15.0, 80.0, 0.4, -9.0, 0.25, 1.6),
            osc("PAP", 1.5, 8.0, 20.0, 0.3, -6.0, 0.4, 1.6),
            osc("CVP", 1.5, 2.0, 8.0, 0.2, -7.5, 0.55, 1.6),
            osc("ECG", 1.5, 1.0, 0.0, 0.8, 1.5, 1.3, 1.6),
            osc("pleth", 1.5, 1.0, 2.0, 0.3, -4.5, 0.1, 1.6),
            osc("airway", 0.25, 10.0, 5.0, 0.1, 0.0, 1.0, 1.2),
        ];
        let boundaries = (1..num_regimes)
            .map(|r| r as f64 / num_regimes as f64)
            .collect();
        Self {
            num_subjects,
            sample_rate_hz: 50.0,
            baseline_minutes: 3.0,
            bleed_minutes: 9.0,
            num_regimes,
            regime_boundaries: vec![boundaries],
            draw_interval_minutes: 2.0,
            first_draw_minutes: 2.0,
            draw_width_seconds: 0.4,
            draw_artifact_magnitude: 2.0,
            channels,
            noise_std: 0.1,
            subject_jitter: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_subjects == 0 {
            return bad("num_subjects must be positive".into());
        }
        for (name, v) in [
            ("sample_rate_hz", self.sample_rate_hz),
            ("baseline_minutes", self.baseline_minutes),
            ("bleed_minutes", self.bleed_minutes),
            ("draw_interval_minutes", self.draw_interval_minutes),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.first_draw_minutes >= 0.0 && self.draw_width_seconds >= 0.0) {
            return bad("draw timing must be non-negative".into());
        }
        if !(self.noise_std >= 0.0 && self.subject_jitter >= 0.0) {
            return bad("noise_std and subject_jitter must be non-negative".into());
        }
        if self.num_regimes < 2 {
            return bad("num_regimes must be at least 2".into());
        }
        if self.channels.is_empty() {
            return bad("at least one channel is required".into());
        }
        if self.regime_boundaries.len() != 1 && self.regime_boundaries.len() != self.num_subjects {
            return bad(format!(
                "regime_boundaries must hold 1 or {} lists, got {}",
                self.num_subjects,
                self.regime_boundaries.len()
            ));
        }
        for b in &self.regime_boundaries {
            if b.len() != self.num_regimes - 1 {
                return bad(format!(
                    "{} regimes need {} boundaries, got {}",
                    self.num_regimes,
                    self.num_regimes - 1,
                    b.len()
                ));
            }
            if b.iter().any(|&x| !(x > 0.0 && x < 1.0)) || b.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!(
                    "boundaries {b:?} must be strictly increasing in (0, 1)"
                ));
            }
        }
        for ch in &self.channels {
            let n = self.num_regimes + 1;
            for (what, v) in [
                ("mean_shift", &ch.mean_shift),
                ("amplitude_scale", &ch.amplitude_scale),
                ("frequency_scale", &ch.frequency_scale),
                ("drift_per_minute", &ch.drift_per_minute),
            ] {
                if v.len() != n {
                    return bad(format!("channel {}: {what} needs {n} entries", ch.name));
                }
            }
        }
        Ok(())
    }

    pub fn total_timesteps(&self) -> usize {
        ((self.baseline_minutes + self.bleed_minutes) * 60.0 * self.sample_rate_hz).round() as usize
    }

    pub fn bleed_start_idx(&self) -> usize {
        (self.baseline_minutes * 60.0 * self.sample_rate_hz).round() as usize
    }

    /// Timestep indices where regimes change for `subject`.
    pub fn boundary_indices(&self, subject: usize) -> Vec<usize> {
        let b = if self.regime_boundaries.len() == 1 {
            &self.regime_boundaries[0]
        } else {
            &self.regime_boundaries[subject]
        };
        let start = self.bleed_start_idx();
        let dur = self.total_timesteps() - start;
        b.iter()
            .map(|f| start + (f * dur as f64).round() as usize)
            .collect()
    }

    pub fn draw_indices(&self) -> Vec<usize> {
        let total = self.total_timesteps();
        let per_min = 60.0 * self.sample_rate_hz;
        (0..)
            .map(|m| {
                ((self.first_draw_minutes + m as f64 * self.draw_interval_minutes) * per_min)
                    .round() as usize
            })
            .take_while(|&i| i < total)
            .collect()
    }
}

/// Generates one labeled series per subject. Identical configs give
/// bit-identical output; each subject draws from its own RNG stream.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<SubjectSeries>> {
    config.validate()?;
    let total = config.total_timesteps();
    let bleed_start = config.bleed_start_idx();
    let draws = config.draw_indices();
    let width = (config.draw_width_seconds * config.sample_rate_hz).round() as usize;
    let dt = 1.0 / config.sample_rate_hz;
    let digits = config.num_subjects.to_string().len().max(2);

    (0..config.num_subjects)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(s as u64);
            let boundaries = config.boundary_indices(s);
            let labels: Vec<u32> = (0..total)
                .map(|t| {
                    if t < bleed_start {
                        0
                    } else {
                        1 + boundaries.partition_point(|&b| b <= t) as u32
                    }
                })
                .collect();
            let regime_start = |r: u32| -> usize {
                match r {
                    0 => 0,
                    1 => bleed_start,
                    r => boundaries[r as usize - 2],
                }
            };

            let gauss = Normal::new(0.0, 1.0).unwrap();
            let jitter = |rng: &mut ChaCha8Rng| 1.0 + config.subject_jitter * gauss.sample(rng);
            let mut values = Matrix::zeros(config.channels.len(), total);
            for (c, ch) in config.channels.iter().enumerate() {
                let amp = ch.amplitude * jitter(&mut rng);
                let freq = ch.base_frequency_hz * jitter(&mut rng);
                let offset =
                    ch.offset + ch.amplitude * config.subject_jitter * gauss.sample(&mut rng);
                let mut phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                let row = values.row_mut(c);
                for (t, v) in row.iter_mut().enumerate() {
                    let r = labels[t] as usize;
                    let minutes_in = (t - regime_start(labels[t])) as f64 * dt / 60.0;
                    let level = offset
                        + ch.amplitude * (ch.mean_shift[r] + ch.drift_per_minute[r] * minutes_in);
                    let a = amp * ch.amplitude_scale[r];
                    let wave = phase.sin() + ch.harmonic * (2.0 * phase).sin();
                    *v =
                        level + a * wave + ch.amplitude * config.noise_std * gauss.sample(&mut rng);
                    phase += std::f64::consts::TAU * freq * ch.frequency_scale[r] * dt;
                }
                for &d in &draws {
                    let end = (d + width.max(1)).min(total);
                    for v in &mut row[d..end] {
                        *v += config.draw_artifact_magnitude * ch.amplitude;
                    }
                }
            }
            SubjectSeries::new(
                format!("subject-{:0digits$}", s + 1),
                config.sample_rate_hz,
                config.channels.iter().map(|c| c.name.clone()).collect(),
                values,
                bleed_start,
                draws.clone(),
                Some(labels),
            )
        })
        .collect()
}

/// Writes one CSV per subject plus `manifest.json` listing them.
pub fn write_dataset(series: &[SubjectSeries], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(series.len());
    for s in series {
        let p = dir.join(format!("{}.csv", s.subject_id));
        save_series(s, &p)?;
        files.push(p);
    }
    let manifest = DatasetManifest {
        subjects: series
            .iter()
            .map(|s| DatasetEntry {
                subject_id: s.subject_id.clone(),
                file: format!("{}.csv", s.subject_id),
                num_timesteps: s.num_timesteps(),
                sample_rate_hz: s.sample_rate_hz,
            })
            .collect(),
    };
    let mp = dir.join("manifest.json");
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
    Ok(files)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub subject_id: String,
    pub file: String,
    pub num_timesteps: usize,
    pub sample_rate_hz: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<DatasetEntry>,
}

/// Loads every subject listed in `dir/manifest.json`, or every `*.csv` in
/// name order when no manifest exists.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SubjectSeries>> {
    let dir = dir.as_ref();
    let mp = dir.join("manifest.json");
    let files: Vec<PathBuf> = if mp.exists() {
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.subjects.iter().map(|e| dir.join(&e.file)).collect()
    } else {
        let mut v: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        v
    };
    files.iter().map(load_series).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(rows: &[Vec<f64>]) -> SubjectSeries {
        let names = (0..rows.len()).map(|i| format!("c{i}")).collect();
        SubjectSeries::new("s", 250.0, names, Matrix::from_rows(rows), 0, vec![], None).unwrap()
    }

    #[test]
    fn two_point_channel_normalizes_to_unit_pair() {
        let (n, rep) = normalize(&series(&[vec![1.0, 3.0]])).unwrap();
        assert_eq!(n.values.row(0), &[-1.0, 1.0]);
        assert!(!rep.has_warning());
    }

    #[test]
    fn constant_channel_is_centred_and_flagged() {
        let (n, rep) = normalize(&series(&[vec![5.0, 5.0, 5.0]])).unwrap();
        assert_eq!(n.values.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(rep.dead_channels, vec![0]);
    }

    #[test]
    fn ramp_normalizes_to_zero_mean_unit_std() {
        let (n, _) = normalize(&series(&[(0..10).map(f64::from).collect()])).unwrap();
        let row = n.values.row(0);
        // independent recomputation with Kahan summation
        let kahan = |it: &mut dyn Iterator<Item = f64>| {
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for x in it {
                let y = x - c;
                let t = s + y;
                c = (t - s) - y;
                s = t;
            }
            s
        };
        let mean = kahan(&mut row.iter().copied()) / 10.0;
        let var = kahan(&mut row.iter().map(|v| (v - mean).powi(2))) / 10.0;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalization_rejects_single_sample() {
        assert!(normalize(&series(&[vec![1.0]])).is_err());
    }

    #[test]
    fn window_count_is_floor_division() {
        let s = series(&[vec![0.0; 70_000]]);
        let w = make_windows(&s, 600).unwrap();
        assert_eq!(w.len(), 116);
        assert_eq!(70_000 - 116 * 600, 400);
        // 600 steps at 250 Hz
        assert!((600.0 / s.sample_rate_hz - 2.4).abs() < 1e-12);
        assert!((w.windows[1].seconds_from_bleed - 2.4).abs() < 1e-12);
    }

    #[test]
    fn draw_membership_marks_the_containing_window() {
        let mut s = series(&[vec![0.0; 1800]]);
        s.draw_events = vec![700];
        let w = make_windows(&s, 600).unwrap();
        let flags: Vec<bool> = w.windows.iter().map(|w| w.overlaps_draw).collect();
        assert_eq!(flags, vec![false, true, false]);
    }

    #[test]
    fn window_longer_than_series_gives_empty_set() {
        let s = series(&[vec![0.0; 10]]);
        assert!(make_windows(&s, 11).unwrap().is_empty());
        assert!(make_windows(&s, 0).is_err());
    }

    #[test]
    fn invalid_annotations_are_rejected() {
        let m = Matrix::from_rows(&[vec![0.0; 5]]);
        let names = vec!["a".to_string()];
        assert!(SubjectSeries::new("s", 1.0, names.clone(), m.clone(), 5, vec![], None).is_err());
        assert!(
            SubjectSeries::new("s", 1.0, names.clone(), m.clone(), 0, vec![3, 3], None).is_err()
        );
        assert!(SubjectSeries::new(
            "s",
            1.0,
            names.clone(),
            m.clone(),
            0,
            vec![],
            Some(vec![0; 4])
        )
        .is_err());
        let nan = Matrix::from_rows(&[vec![0.0, f64::NAN]]);
        assert!(SubjectSeries::new("s", 1.0, names, nan, 0, vec![], None).is_err());
    }

    #[test]
    fn regime_labels_switch_exactly_at_boundaries() {
        let mut cfg = SyntheticConfig::desk(1, 3, 7);
        cfg.baseline_minutes = 1.0;
        cfg.bleed_minutes = 10.0;
        cfg.regime_boundaries = vec![vec![0.3, 0.7]];
        let s = &generate_synthetic(&cfg).unwrap()[0];
        let labels = s.regime_labels.as_ref().unwrap();
        let start = s.bleed_start_idx;
        let d = s.num_timesteps() - start;
        assert_eq!(d, 10 * 60 * 50);
        let b1 = start + 3 * d / 10;
        let b2 = start + 7 * d / 10;
        assert_eq!(labels[start - 1], 0);
        assert_eq!(labels[start], 1);
        assert_eq!(labels[b1 - 1], 1);
        assert_eq!(labels[b1], 2);
        assert_eq!(labels[b2 - 1], 2);
        assert_eq!(labels[b2], 3);
        assert_eq!(*labels.last().unwrap(), 3);
    }

    #[test]
    fn draws_follow_the_interval() {
        let mut cfg = SyntheticConfig::desk(1, 2, 1);
        cfg.sample_rate_hz = 1.0;
        cfg.baseline_minutes = 30.0;
        cfg.bleed_minutes = 90.0;
        cfg.first_draw_minutes = 30.0;
        cfg.draw_interval_minutes = 30.0;
        assert_eq!(cfg.draw_indices(), vec![30 * 60, 60 * 60, 90 * 60]);
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let mut cfg = SyntheticConfig::desk(2, 2, 11);
        cfg.baseline_minutes = 0.5;
        cfg.bleed_minutes = 1.0;
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed = 12;
        let c = generate_synthetic(&cfg).unwrap();
        assert!(a[0]
            .values
            .as_slice()
            .iter()
            .zip(c[0].values.as_slice())
            .any(|(x, y)| x != y));
    }

    #[test]
    fn config_validation_catches_bad_boundaries() {
        let mut cfg = SyntheticConfig::desk(2, 3, 0);
        cfg.regime_boundaries = vec![vec![0.7, 0.3]];
        assert!(cfg.validate().is_err());
        cfg.regime_boundaries = vec![vec![0.3, 1.0]];
        assert!(cfg.validate().is_err());
        cfg.regime_boundaries = vec![vec![0.3, 0.6]; 3];
        assert!(cfg.validate().is_err());
        cfg.regime_boundaries = vec![vec![0.3, 0.6]; 2];
        assert!(cfg.validate().is_ok());
        cfg.bleed_minutes = 0.0;
        assert!(cfg.validate().is_err());
    }
}
