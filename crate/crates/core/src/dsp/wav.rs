use std::io::{Cursor, Read};
use std::path::Path;

use super::{resample, Waveform};
use crate::error::{AsitError, Result};

fn decode<R: Read>(reader: hound::WavReader<R>, target_sr: u32) -> Result<Waveform> {
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AsitError::Decode(format!(
            "expected 16-bit integer PCM, got {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AsitError::Decode("zero channels".into()));
    }
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| AsitError::Decode(e.to_string()))?;
    if raw.is_empty() {
        return Err(AsitError::EmptyInput("audio file has no samples".into()));
    }
    let mono: Vec<f64> = raw
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    if mono.is_empty() {
        return Err(AsitError::EmptyInput("audio file has no complete frames".into()));
    }
    let target_sr = if target_sr == 0 { spec.sample_rate } else { target_sr };
    Waveform::new(resample(&mono, spec.sample_rate, target_sr), target_sr)
}

/// Reads a 16-bit PCM WAV, averages channels to mono and resamples to
/// `target_sr` (0 keeps the file's rate).
pub fn load_and_resample(path: impl AsRef<Path>, target_sr: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AsitError::io(path, io),
        other => AsitError::Decode(format!("{}: {other}", path.display())),
    })?;
    decode(reader, target_sr)
}

pub fn load_wav_bytes(bytes: &[u8], target_sr: u32) -> Result<Waveform> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| AsitError::Decode(e.to_string()))?;
    decode(reader, target_sr)
}

/// Writes a mono 16-bit PCM WAV; samples are clipped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => AsitError::io(path, io),
        other => AsitError::Data(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in w.samples() {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}
