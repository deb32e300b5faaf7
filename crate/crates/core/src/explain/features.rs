use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::signal::Window;

pub const POWER_BINS: usize = 10;
/// mean, median, std, p2.5, p97.5, range95, then the power bins.
pub const FEATURES_PER_CHANNEL: usize = 6 + POWER_BINS;

/// Per-channel summary statistics and binned spectral maxima, channel-major.
pub type FeatureVector = Vec<f64>;

pub fn feature_names(channels: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(channels.len() * FEATURES_PER_CHANNEL);
    for ch in channels {
        for stat in ["mean", "median", "std", "p2_5", "p97_5", "range95"] {
            out.push(format!("{ch}_{stat}"));
        }
        for b in 0..POWER_BINS {
            out.push(format!("{ch}_power{b}"));
        }
    }
    out
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Maximum power in each of [`POWER_BINS`] equal-width bands over
/// `[0, Nyquist]`, after removing the mean. Bin of DFT index `k` is
/// `floor(2 * POWER_BINS * k / n)`, with Nyquist folded into the last bin.
pub fn binned_max_power(values: &[f64], planner: &mut FftPlanner<f64>) -> [f64; POWER_BINS] {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = values.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let mut bins = [0.0f64; POWER_BINS];
    for (k, x) in buf.iter().enumerate().take(n / 2 + 1) {
        let b = (2 * POWER_BINS * k / n).min(POWER_BINS - 1);
        bins[b] = bins[b].max(x.norm_sqr());
    }
    bins
}

fn channel_features(values: &[f64], planner: &mut FftPlanner<f64>, out: &mut Vec<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = percentile(&sorted, 50.0);
    let lo = percentile(&sorted, 2.5);
    let hi = percentile(&sorted, 97.5);
    out.extend_from_slice(&[mean, median, std, lo, hi, hi - lo]);
    out.extend_from_slice(&binned_max_power(values, planner));
}

/// Features for every channel of `window`, channel-major.
pub fn extract_features(window: &Window) -> Result<FeatureVector> {
    let mut planner = FftPlanner::new();
    extract_features_with(window, &mut planner)
}

/// Same as [`extract_features`], reusing an FFT planner across windows.
pub fn extract_features_with(
    window: &Window,
    planner: &mut FftPlanner<f64>,
) -> Result<FeatureVector> {
    if window.values.cols() < 2 {
        return Err(Error::Precondition(format!(
            "feature extraction needs at least 2 timesteps, window at {} has {}",
            window.start_idx,
            window.values.cols()
        )));
    }
    let mut out = Vec::with_capacity(window.values.rows() * FEATURES_PER_CHANNEL);
    for c in 0..window.values.rows() {
        channel_features(window.values.row(c), planner, &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn window(rows: &[Vec<f64>]) -> Window {
        let m = Matrix::from_rows(rows);
        Window {
            subject_id: "s".into(),
            start_idx: 0,
            length: m.cols(),
            values: m,
            seconds_from_bleed: 0.0,
            overlaps_draw: false,
            majority_regime: None,
        }
    }

    #[test]
    fn constant_channel_collapses() {
        let f = extract_features(&window(&[vec![3.5; 40]])).unwrap();
        assert_eq!(&f[..6], &[3.5, 3.5, 0.0, 3.5, 3.5, 0.0]);
        assert!(f[6..].iter().all(|&p| p == 0.0));
        assert_eq!(f.len(), FEATURES_PER_CHANNEL);
    }

    #[test]
    fn ramp_statistics() {
        let f = extract_features(&window(&[(0..10).map(f64::from).collect()])).unwrap();
        assert!((f[0] - 4.5).abs() < 1e-12);
        assert!((f[1] - 4.5).abs() < 1e-12);
        let direct = ((0..10).map(|x| (x as f64 - 4.5).powi(2)).sum::<f64>() / 10.0).sqrt();
        assert!((f[2] - direct).abs() < 1e-12);
        assert!((f[2] - 2.8723).abs() < 1e-4);
        // rank 0.025 * 9 = 0.225
        assert!((f[3] - 0.225).abs() < 1e-12);
        assert!((f[4] - 8.775).abs() < 1e-12);
        assert!((f[5] - 8.55).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_peaks_in_its_bin() {
        // direct O(n^2) DFT as the reference
        let n = 120;
        for cycles in [3usize, 14, 31, 47, 58] {
            let x: Vec<f64> = (0..n)
                .map(|t| (std::f64::consts::TAU * cycles as f64 * t as f64 / n as f64).sin())
                .collect();
            let f = extract_features(&window(std::slice::from_ref(&x))).unwrap();
            let power = &f[6..];
            let mut reference = [0.0f64; POWER_BINS];
            for k in 0..=n / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let a = std::f64::consts::TAU * (k * t) as f64 / n as f64;
                    re += v * a.cos();
                    im -= v * a.sin();
                }
                let b = (20 * k / n).min(9);
                reference[b] = reference[b].max(re * re + im * im);
            }
            let j = 20 * cycles / n;
            for b in 0..POWER_BINS {
                assert!((power[b] - reference[b]).abs() < 1e-6 * reference[j]);
                if b != j {
                    assert!(power[b] <= 0.01 * power[j]);
                }
            }
        }
    }

    #[test]
    fn short_window_is_rejected() {
        assert!(extract_features(&window(&[vec![1.0]])).is_err());
    }

    #[test]
    fn names_line_up_with_values() {
        let names = feature_names(&["ART".into(), "CVP".into()]);
        assert_eq!(names.len(), 2 * FEATURES_PER_CHANNEL);
        assert_eq!(names[0], "ART_mean");
        assert_eq!(names[FEATURES_PER_CHANNEL + 6], "CVP_power0");
    }
}
