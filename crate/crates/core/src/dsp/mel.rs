use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{DspConfig, LogMelSpectrogram, Waveform};
use crate::error::{AsitError, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Symmetric Hanning window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Number of frames for `len` samples: `floor((len - window) / hop) + 1`.
pub fn frame_count(len: usize, window: usize, hop: usize) -> Option<usize> {
    if len < window || hop == 0 {
        None
    } else {
        Some((len - window) / hop + 1)
    }
}

/// Edge and center frequencies (Hz) of the `n_mels` triangles: `n_mels + 2`
/// points evenly spaced on the mel scale over `[0, sr/2]`.
fn mel_points(cfg: &DspConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate_hz as f64 / 2.0);
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(top * i as f64 / (n - 1) as f64))
        .collect()
}

/// Peak frequency (Hz) of each triangular filter.
pub fn filter_center_frequencies(cfg: &DspConfig) -> Vec<f64> {
    let pts = mel_points(cfg);
    pts[1..pts.len() - 1].to_vec()
}

/// `n_mels x (fft_size/2 + 1)` triangular filterbank with unit peaks.
pub fn mel_filterbank_matrix(cfg: &DspConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let pts = mel_points(cfg);
    let n_bins = cfg.n_bins();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        let mut any = false;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = ((f - lo) / (center - lo)).min((hi - f) / (hi - center));
            if w > 0.0 {
                fb[[m, k]] = w;
                any = true;
            }
        }
        if !any {
            return Err(AsitError::config(
                "dsp.n_mels",
                format!(
                    "filter {m} ({lo:.2}-{hi:.2} Hz) contains no FFT bin at fft_size {}",
                    cfg.fft_size
                ),
            ));
        }
    }
    Ok(fb)
}

/// Log-mel spectrogram at the waveform's native frame count.
pub fn compute_log_mel(w: &Waveform, cfg: &DspConfig) -> Result<LogMelSpectrogram> {
    cfg.validate()?;
    if w.sample_rate() != cfg.sample_rate_hz {
        return Err(AsitError::Argument(format!(
            "waveform at {} Hz, config expects {} Hz",
            w.sample_rate(),
            cfg.sample_rate_hz
        )));
    }
    let win = cfg.window_len();
    let hop = cfg.hop_len();
    let frames = frame_count(w.len(), win, hop).ok_or(AsitError::TooShort {
        what: "waveform samples",
        got: w.len(),
        need: win,
    })?;
    let fb = mel_filterbank_matrix(cfg)?;
    let window = hann_window(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let n_bins = cfg.n_bins();
    let samples = w.samples();

    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut spectrum = vec![0.0; n_bins];
    let mut out = Array2::zeros((frames, cfg.n_mels));
    for t in 0..frames {
        let frame = &samples[t * hop..t * hop + win];
        for (b, (x, h)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *b = Complex::new(x * h, 0.0);
        }
        for b in buf[win..].iter_mut() {
            *b = Complex::new(0.0, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (s, c) in spectrum.iter_mut().zip(&buf[..n_bins]) {
            let p = c.norm_sqr();
            *s = if cfg.use_power { p } else { p.sqrt() };
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row(m).iter().zip(&spectrum).map(|(a, b)| a * b).sum();
            out[[t, m]] = (e + cfg.log_floor).ln();
        }
    }
    LogMelSpectrogram::new(out, cfg.hop_ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_filter_spans_band() {
        let cfg = DspConfig {
            n_mels: 1,
            ..DspConfig::default()
        };
        let fb = mel_filterbank_matrix(&cfg).unwrap();
        assert_eq!(fb.nrows(), 1);
        let row = fb.row(0);
        let (peak, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert!(peak > 0 && peak < cfg.n_bins() - 1);
        // Nonzero everywhere strictly inside the band.
        assert!(row.iter().skip(1).take(cfg.n_bins() - 2).all(|&v| v > 0.0));
        let centers = filter_center_frequencies(&cfg);
        assert!(centers[0] > 0.0 && centers[0] < 16_000.0);
    }

    #[test]
    fn too_many_filters_is_config_error() {
        let cfg = DspConfig {
            n_mels: 400,
            ..DspConfig::default()
        };
        assert!(matches!(mel_filterbank_matrix(&cfg), Err(AsitError::Config { .. })));
    }

    #[test]
    fn filters_are_contiguous_nonnegative_with_unique_peak() {
        let cfg = DspConfig::default();
        let fb = mel_filterbank_matrix(&cfg).unwrap();
        let mut last_peak = 0;
        for (m, row) in fb.outer_iter().enumerate() {
            assert!(row.iter().all(|&v| v >= 0.0));
            let support: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
            assert_eq!(support.last().unwrap() - support[0] + 1, support.len(), "row {m} not contiguous");
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(row.iter().filter(|&&v| v == max).count(), 1, "row {m}");
            let peak = row.iter().position(|&v| v == max).unwrap();
            assert!(peak >= last_peak);
            last_peak = peak;
        }
        let centers = filter_center_frequencies(&cfg);
        assert!(centers.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn silence_hits_log_floor() {
        let cfg = DspConfig::default();
        let w = Waveform::new(vec![0.0; 4000], cfg.sample_rate_hz).unwrap();
        let s = compute_log_mel(&w, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(s.values.iter().all(|&v| v == floor));
        assert_eq!(s.frames(), frame_count(4000, 800, 320).unwrap());
    }

    #[test]
    fn short_waveform_rejected() {
        let cfg = DspConfig::default();
        let w = Waveform::new(vec![0.0; 799], cfg.sample_rate_hz).unwrap();
        assert!(matches!(compute_log_mel(&w, &cfg), Err(AsitError::TooShort { .. })));
    }

    #[test]
    fn six_seconds_gives_598_native_frames() {
        assert_eq!(frame_count(192_000, 800, 320), Some(598));
    }
}
