//! Raw audio to normalized log-mel spectrograms.

mod container;
mod mel;
mod resample;
mod wav;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{AsitError, Result};

pub use container::{read_spectrogram, spectrogram_to_csv, write_spectrogram, SPEC_MAGIC, SPEC_VERSION};
pub use mel::{compute_log_mel, frame_count, hann_window, hz_to_mel, mel_filterbank_matrix, mel_to_hz, filter_center_frequencies};
pub use resample::resample;
pub use wav::{load_and_resample, load_wav_bytes, write_wav};

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AsitError::Argument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AsitError::Argument(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fft_size: usize,
    pub log_floor: f64,
    pub target_frames: usize,
    /// Project the power spectrum (|X|^2) rather than the magnitude.
    pub use_power: bool,
    /// Divide by `2 * std` when normalizing instead of `std`.
    pub norm_two_std: bool,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sample_rate_hz: 32_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 128,
            fft_size: 1024,
            log_floor: 1e-10,
            target_frames: 592,
            use_power: true,
            norm_two_std: true,
        }
    }
}

impl DspConfig {
    pub fn window_len(&self) -> usize {
        (self.window_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(AsitError::config("dsp.sample_rate_hz", "must be > 0"));
        }
        if !(self.window_ms > 0.0) || !(self.hop_ms > 0.0) {
            return Err(AsitError::config("dsp.window_ms", "window and hop must be > 0"));
        }
        if self.hop_len() == 0 || self.window_len() == 0 {
            return Err(AsitError::config("dsp.hop_ms", "window/hop shorter than one sample"));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(AsitError::config("dsp.fft_size", "must be a power of two"));
        }
        if self.fft_size < self.window_len() {
            return Err(AsitError::config(
                "dsp.fft_size",
                format!("must be >= window length {}", self.window_len()),
            ));
        }
        if self.n_mels == 0 {
            return Err(AsitError::config("dsp.n_mels", "must be >= 1"));
        }
        if !(self.log_floor > 0.0) || !self.log_floor.is_finite() {
            return Err(AsitError::config("dsp.log_floor", "must be a positive finite number"));
        }
        if self.target_frames == 0 {
            return Err(AsitError::config("dsp.target_frames", "must be >= 1"));
        }
        Ok(())
    }
}

/// T x F log-mel energies (time along rows).
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Array2<f64>,
    pub frame_hop_ms: f64,
}

impl LogMelSpectrogram {
    pub fn new(values: Array2<f64>, frame_hop_ms: f64) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(AsitError::EmptyInput("spectrogram with zero frames or bins".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AsitError::Argument("spectrogram contains non-finite values".into()));
        }
        Ok(LogMelSpectrogram {
            values,
            frame_hop_ms,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn mel_bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Time-averaged energy per mel bin.
    pub fn mean_over_time(&self) -> Vec<f64> {
        self.values.mean_axis(Axis(0)).expect("nonempty").to_vec()
    }
}

/// `(s - mean) / d` where `d` is `2 * std` (default) or `std`.
pub fn normalize(s: &LogMelSpectrogram, mean: f64, std: f64, two_std: bool) -> Result<LogMelSpectrogram> {
    if !mean.is_finite() || !std.is_finite() {
        return Err(AsitError::Argument(format!(
            "normalization statistics must be finite (mean={mean}, std={std})"
        )));
    }
    if std <= 0.0 {
        return Err(AsitError::Argument(format!("std must be > 0, got {std}")));
    }
    let denom = if two_std { 2.0 * std } else { std };
    Ok(LogMelSpectrogram {
        values: s.values.mapv(|v| (v - mean) / denom),
        frame_hop_ms: s.frame_hop_ms,
    })
}

/// Mean and population standard deviation over every entry of a corpus.
pub fn corpus_stats<'a, I>(corpus: I) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = &'a LogMelSpectrogram>,
{
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for s in corpus {
        for &v in s.values.iter() {
            n += 1;
            let d = v - mean;
            mean += d / n as f64;
            m2 += d * (v - mean);
        }
    }
    if n == 0 {
        return Err(AsitError::EmptyInput("empty corpus".into()));
    }
    Ok((mean, (m2 / n as f64).sqrt()))
}

/// Linear interpolation along the time axis to `target` frames. Endpoints map
/// to endpoints.
pub fn resize_frames(values: &Array2<f64>, target: usize) -> Array2<f64> {
    let (t, f) = values.dim();
    if t == target {
        return values.clone();
    }
    let mut out = Array2::zeros((target, f));
    for j in 0..target {
        let pos = if target == 1 || t == 1 {
            0.0
        } else {
            j as f64 * (t - 1) as f64 / (target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(t - 1);
        let hi = (lo + 1).min(t - 1);
        let w = pos - lo as f64;
        for k in 0..f {
            out[[j, k]] = values[[lo, k]] * (1.0 - w) + values[[hi, k]] * w;
        }
    }
    out
}

/// Center-crop or zero-pad (in normalized space) along time to `target` frames.
pub fn fit_frames(values: &Array2<f64>, target: usize) -> Array2<f64> {
    let (t, f) = values.dim();
    if t == target {
        return values.clone();
    }
    let mut out = Array2::zeros((target, f));
    if t > target {
        let start = (t - target) / 2;
        out.assign(&values.slice(ndarray::s![start..start + target, ..]));
    } else {
        out.slice_mut(ndarray::s![..t, ..]).assign(values);
    }
    out
}
