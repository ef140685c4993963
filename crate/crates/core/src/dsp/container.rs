//! Binary spectrogram container.
//!
//! Layout (little-endian):
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 8     | magic `ASITSPEC`              |
//! | 4     | version (u32, currently 1)    |
//! | 4     | T, frame count (u32)          |
//! | 4     | F, mel bins (u32)             |
//! | 4     | frame hop in ms (f32)         |
//! | 4·T·F | values, row-major f32         |

use std::io::{Read, Write};

use ndarray::Array2;

use super::LogMelSpectrogram;
use crate::error::{AsitError, Result};

pub const SPEC_MAGIC: &[u8; 8] = b"ASITSPEC";
pub const SPEC_VERSION: u32 = 1;

pub fn write_spectrogram<W: Write>(mut out: W, s: &LogMelSpectrogram) -> std::io::Result<()> {
    let (t, f) = s.shape();
    out.write_all(SPEC_MAGIC)?;
    out.write_all(&SPEC_VERSION.to_le_bytes())?;
    out.write_all(&(t as u32).to_le_bytes())?;
    out.write_all(&(f as u32).to_le_bytes())?;
    out.write_all(&(s.frame_hop_ms as f32).to_le_bytes())?;
    for &v in s.values.iter() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| AsitError::Decode(format!("truncated spectrogram header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_spectrogram<R: Read>(mut r: R) -> Result<LogMelSpectrogram> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| AsitError::Decode(format!("truncated spectrogram magic: {e}")))?;
    if &magic != SPEC_MAGIC {
        return Err(AsitError::Decode("not a spectrogram container".into()));
    }
    let version = read_u32(&mut r)?;
    if version != SPEC_VERSION {
        return Err(AsitError::Decode(format!("unsupported spectrogram version {version}")));
    }
    let t = read_u32(&mut r)? as usize;
    let f = read_u32(&mut r)? as usize;
    let hop = f32::from_bits(read_u32(&mut r)?) as f64;
    let mut payload = vec![0u8; 4 * t * f];
    r.read_exact(&mut payload)
        .map_err(|e| AsitError::Decode(format!("truncated spectrogram payload: {e}")))?;
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let values = Array2::from_shape_vec((t, f), values).map_err(|e| AsitError::Decode(e.to_string()))?;
    LogMelSpectrogram::new(values, hop)
}

/// One frame per line, comma-separated mel bins.
pub fn spectrogram_to_csv(s: &LogMelSpectrogram) -> String {
    let mut out = String::new();
    for row in s.values.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_f32_exact() {
        let v = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.5 + j as f64 * 0.25);
        let s = LogMelSpectrogram::new(v, 10.0).unwrap();
        let mut buf = Vec::new();
        write_spectrogram(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), 24 + 4 * 15);
        let back = read_spectrogram(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_spectrogram(&b"NOTSPEC!\x01\0\0\0"[..]).is_err());
        let s = LogMelSpectrogram::new(Array2::zeros((2, 2)), 10.0).unwrap();
        let mut buf = Vec::new();
        write_spectrogram(&mut buf, &s).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_spectrogram(buf.as_slice()).is_err());
    }

    #[test]
    fn csv_has_one_line_per_frame() {
        let s = LogMelSpectrogram::new(Array2::zeros((4, 2)), 10.0).unwrap();
        let csv = spectrogram_to_csv(&s);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap(), "0,0");
    }
}
