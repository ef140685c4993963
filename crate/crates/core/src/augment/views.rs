use ndarray::s;
use rand::Rng;

use super::AugmentConfig;
use crate::dsp::{resize_frames, LogMelSpectrogram};
use crate::error::{AsitError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: LogMelSpectrogram,
    pub view_b: LogMelSpectrogram,
    pub source_id: u64,
}

/// Crops frames `[start, start + len)` and linearly resizes them to `target`.
pub fn crop_and_resize(s: &LogMelSpectrogram, start: usize, len: usize, target: usize) -> Result<LogMelSpectrogram> {
    if len == 0 || start + len > s.frames() {
        return Err(AsitError::Argument(format!(
            "crop [{start}, {}) outside {} frames",
            start + len,
            s.frames()
        )));
    }
    let crop = s.values.slice(s![start..start + len, ..]).to_owned();
    LogMelSpectrogram::new(resize_frames(&crop, target), s.frame_hop_ms)
}

fn random_view<R: Rng + ?Sized>(
    s: &LogMelSpectrogram,
    cfg: &AugmentConfig,
    target: usize,
    rng: &mut R,
) -> Result<LogMelSpectrogram> {
    let t = s.frames();
    let frac = if cfg.crop_max > cfg.crop_min {
        rng.gen_range(cfg.crop_min..=cfg.crop_max)
    } else {
        cfg.crop_min
    };
    let len = ((frac * t as f64).round() as usize).clamp(1, t);
    let start = rng.gen_range(0..=t - len);
    crop_and_resize(s, start, len, target)
}

/// Two independent random time crops of `s`, each resized to `target` frames.
pub fn make_views<R: Rng + ?Sized>(
    s: &LogMelSpectrogram,
    cfg: &AugmentConfig,
    target: usize,
    source_id: u64,
    rng: &mut R,
) -> Result<ViewPair> {
    let need = (cfg.crop_min * target as f64).ceil() as usize;
    if s.frames() < need {
        return Err(AsitError::TooShort {
            what: "spectrogram frames",
            got: s.frames(),
            need,
        });
    }
    let view_a = random_view(s, cfg, target, rng)?;
    let view_b = random_view(s, cfg, target, rng)?;
    Ok(ViewPair {
        view_a,
        view_b,
        source_id,
    })
}
