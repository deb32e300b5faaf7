//! Cluster timelines and their SVG/CSV renderings, plus confusion heatmaps.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::io::LabelRow;
use crate::clustering::{label_repeats, ClusterMethod};
use crate::error::{Error, Result};
use crate::explain::ConfusionMatrix;
use crate::signal::SubjectSeries;

/// Colors keyed by label id (cycled past the end).
pub const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#ad494a",
];

pub fn label_color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub window_start: usize,
    pub seconds_from_bleed: f64,
    pub label: usize,
    pub overlaps_draw: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTimeline {
    pub subject_id: String,
    /// `train` or `test` in cross-validated runs.
    pub role: Option<String>,
    pub window_seconds: f64,
    /// Draw events relative to bleed start, in seconds.
    pub draw_seconds: Vec<f64>,
    pub entries: Vec<TimelineEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTimeline {
    pub k: usize,
    pub method: ClusterMethod,
    pub subjects: Vec<SubjectTimeline>,
}

impl ClusterTimeline {
    /// Groups `rows` by subject (first-appearance order). `series` supplies
    /// sample rates and draw events.
    pub fn build(
        rows: &[LabelRow],
        k: usize,
        method: ClusterMethod,
        series: &[SubjectSeries],
        window_length: usize,
    ) -> Result<Self> {
        let by_id: HashMap<&str, &SubjectSeries> =
            series.iter().map(|s| (s.subject_id.as_str(), s)).collect();
        let mut subjects: Vec<SubjectTimeline> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        for r in rows {
            if r.label >= k {
                return Err(Error::Precondition(format!(
                    "label {} outside [0, {k})",
                    r.label
                )));
            }
            let s = by_id.get(r.subject_id.as_str()).ok_or_else(|| {
                Error::Precondition(format!("no series for subject {}", r.subject_id))
            })?;
            let slot = *index.entry(r.subject_id.as_str()).or_insert_with(|| {
                let rate = s.sample_rate_hz;
                let bleed = s.bleed_start_idx as f64 / rate;
                subjects.push(SubjectTimeline {
                    subject_id: r.subject_id.clone(),
                    role: None,
                    window_seconds: window_length as f64 / rate,
                    draw_seconds: s
                        .draw_events
                        .iter()
                        .map(|&d| d as f64 / rate - bleed)
                        .collect(),
                    entries: Vec::new(),
                });
                subjects.len() - 1
            });
            let st = &mut subjects[slot];
            if st
                .entries
                .last()
                .is_some_and(|e| e.seconds_from_bleed >= r.seconds_from_bleed)
            {
                return Err(Error::Precondition(format!(
                    "{}: timeline must be strictly increasing in time",
                    r.subject_id
                )));
            }
            let end = r.window_start + window_length;
            st.entries.push(TimelineEntry {
                window_start: r.window_start,
                seconds_from_bleed: r.seconds_from_bleed,
                label: r.label,
                overlaps_draw: s
                    .draw_events
                    .iter()
                    .any(|&d| d >= r.window_start && d < end),
            });
        }
        Ok(Self {
            k,
            method,
            subjects,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.subjects.iter().map(|s| s.entries.len()).sum()
    }

    /// Total within-subject label repeats (a label recurring after a
    /// different one intervened).
    pub fn repeat_count(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| label_repeats(&s.entries.iter().map(|e| e.label).collect::<Vec<_>>()))
            .sum()
    }

    pub fn set_roles(&mut self, test_subjects: &[String]) {
        for s in &mut self.subjects {
            let role = if test_subjects.contains(&s.subject_id) {
                "test"
            } else {
                "train"
            };
            s.role = Some(role.to_string());
        }
    }
}

/// One row per window, then one row per draw event.
pub fn timeline_csv(t: &ClusterTimeline) -> String {
    let mut out = String::from("subject_id,role,kind,seconds_from_bleed,label,overlaps_draw\n");
    for s in &t.subjects {
        let role = s.role.as_deref().unwrap_or("");
        for e in &s.entries {
            writeln!(
                out,
                "{},{role},window,{},{},{}",
                s.subject_id,
                e.seconds_from_bleed,
                e.label,
                u8::from(e.overlaps_draw)
            )
            .unwrap();
        }
        for d in &s.draw_seconds {
            writeln!(out, "{},{role},draw,{d},,", s.subject_id).unwrap();
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const BAND_HEIGHT: f64 = 18.0;
const BAND_GAP: f64 = 6.0;
const LEFT: f64 = 130.0;
const PLOT_WIDTH: f64 = 840.0;
const TOP: f64 = 30.0;

/// One horizontal band per subject; consecutive windows with the same label
/// are drawn as one segment. Draw events are black dots, bleed start a
/// dashed line.
pub fn timeline_svg(t: &ClusterTimeline) -> Result<String> {
    if t.num_windows() == 0 {
        return Err(Error::Precondition(
            "cannot render an empty timeline".into(),
        ));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &t.subjects {
        for e in &s.entries {
            lo = lo.min(e.seconds_from_bleed);
            hi = hi.max(e.seconds_from_bleed + s.window_seconds);
        }
    }
    lo = lo.min(0.0);
    hi = hi.max(0.0);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let x = |sec: f64| LEFT + (sec - lo) / span * PLOT_WIDTH;
    let height = TOP + t.subjects.len() as f64 * (BAND_HEIGHT + BAND_GAP) + 60.0;
    let width = LEFT + PLOT_WIDTH + 20.0;

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{LEFT:.1}" y="16">{} clusters ({})</text>"#,
        t.k,
        t.method.tag()
    )
    .unwrap();
    for (i, s) in t.subjects.iter().enumerate() {
        let y = TOP + i as f64 * (BAND_HEIGHT + BAND_GAP);
        let name = match &s.role {
            Some(r) => format!("{} ({r})", s.subject_id),
            None => s.subject_id.clone(),
        };
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + BAND_HEIGHT * 0.7,
            escape(&name)
        )
        .unwrap();
        let mut j = 0;
        while j < s.entries.len() {
            let label = s.entries[j].label;
            let mut end = j;
            while end + 1 < s.entries.len() && s.entries[end + 1].label == label {
                end += 1;
            }
            let x0 = x(s.entries[j].seconds_from_bleed);
            let x1 = x(s.entries[end].seconds_from_bleed + s.window_seconds);
            writeln!(
                out,
                r#"<rect x="{x0:.3}" y="{y:.1}" width="{:.3}" height="{BAND_HEIGHT:.1}" fill="{}"/>"#,
                (x1 - x0).max(0.0),
                label_color(label)
            )
            .unwrap();
            j = end + 1;
        }
        for &d in &s.draw_seconds {
            writeln!(
                out,
                r#"<circle cx="{:.3}" cy="{:.1}" r="3" fill="black"/>"#,
                x(d),
                y + BAND_HEIGHT / 2.0
            )
            .unwrap();
        }
    }
    let bottom = TOP + t.subjects.len() as f64 * (BAND_HEIGHT + BAND_GAP);
    let x0 = x(0.0);
    writeln!(
        out,
        r#"<line x1="{x0:.3}" y1="{:.1}" x2="{x0:.3}" y2="{bottom:.1}" stroke="black" stroke-dasharray="4,3"/>"#,
        TOP - 4.0
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{x0:.3}" y="{:.1}" text-anchor="middle">t=0</text>"#,
        bottom + 12.0
    )
    .unwrap();
    for l in 0..t.k {
        let lx = LEFT + l as f64 * 60.0;
        let ly = bottom + 24.0;
        writeln!(
            out,
            r#"<rect x="{lx:.1}" y="{ly:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{l}</text>"#,
            label_color(l),
            lx + 16.0,
            ly + 10.0
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// SVG and CSV renderings of the same timeline.
pub fn render_timeline(t: &ClusterTimeline) -> Result<(String, String)> {
    Ok((timeline_svg(t)?, timeline_csv(t)))
}

/// Row-normalized heatmap with raw counts printed in each cell.
pub fn confusion_svg(cm: &ConfusionMatrix, title: &str) -> String {
    let cell = 36.0;
    let left = 60.0;
    let top = 50.0;
    let size = cm.k as f64 * cell;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif" font-size="11">"#,
        left + size + 20.0,
        top + size + 40.0
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{left:.1}" y="18">{}</text>"#,
        escape(title)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{left:.1}" y="{:.1}">predicted</text><text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})">true</text>"#,
        top - 18.0,
        top + size / 2.0,
        top + size / 2.0
    )
    .unwrap();
    for (r, row) in cm.counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (c, &v) in row.iter().enumerate() {
            let frac = if total > 0 {
                v as f64 / total as f64
            } else {
                0.0
            };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (left + c as f64 * cell, top + r as f64 * cell);
            writeln!(
                out,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="#{shade:02x}{shade:02x}ff" stroke="#cccccc"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{v}</text>"##,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            )
            .unwrap();
        }
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{r}</text>"#,
            left - 6.0,
            top + r as f64 * cell + cell / 2.0 + 4.0
        )
        .unwrap();
    }
    for c in 0..cm.k {
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{c}</text>"#,
            left + c as f64 * cell + cell / 2.0,
            top - 4.0
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn series() -> SubjectSeries {
        SubjectSeries::new(
            "a",
            10.0,
            vec!["x".into()],
            Matrix::from_vec(1, 100, (0..100).map(f64::from).collect()),
            40,
            vec![25, 70],
            None,
        )
        .unwrap()
    }

    fn rows(labels: &[usize]) -> Vec<LabelRow> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| LabelRow {
                subject_id: "a".into(),
                window_start: i * 20,
                seconds_from_bleed: (i as f64 * 20.0 - 40.0) / 10.0,
                label: l,
            })
            .collect()
    }

    #[test]
    fn single_cluster_is_one_band() {
        let t = ClusterTimeline::build(
            &rows(&[0; 5]),
            1,
            ClusterMethod::WardAgglomerative,
            &[series()],
            20,
        )
        .unwrap();
        let svg = timeline_svg(&t).unwrap();
        assert_eq!(svg.matches(&format!("fill=\"{}\"", PALETTE[0])).count(), 2);
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn draw_dots_sit_at_event_times() {
        let t = ClusterTimeline::build(
            &rows(&[0, 1, 1, 0, 2]),
            3,
            ClusterMethod::KMeans,
            &[series()],
            20,
        )
        .unwrap();
        assert_eq!(t.subjects[0].draw_seconds, vec![-1.5, 3.0]);
        let flags: Vec<bool> = t.subjects[0]
            .entries
            .iter()
            .map(|e| e.overlaps_draw)
            .collect();
        assert_eq!(flags, vec![false, true, false, true, false]);
        assert_eq!(t.repeat_count(), 1);
        let csv = timeline_csv(&t);
        assert_eq!(csv.lines().count(), 1 + 5 + 2);
    }

    #[test]
    fn out_of_order_rows_are_rejected() {
        let mut r = rows(&[0, 0]);
        r.swap(0, 1);
        assert!(ClusterTimeline::build(&r, 1, ClusterMethod::KMeans, &[series()], 20).is_err());
    }

    #[test]
    fn palette_is_keyed_by_label() {
        assert_eq!(label_color(3), label_color(3 + PALETTE.len()));
        assert_ne!(label_color(0), label_color(1));
    }
}
