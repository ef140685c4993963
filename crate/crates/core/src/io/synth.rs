//! Seeded synthetic four-class audio corpus.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry, Split};
use crate::dsp::{write_wav, Waveform};
use crate::error::{AsitError, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthClass {
    Sine,
    Chirp,
    NoiseBurst,
    AmTone,
}

impl SynthClass {
    pub const ALL: [SynthClass; 4] = [SynthClass::Sine, SynthClass::Chirp, SynthClass::NoiseBurst, SynthClass::AmTone];

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Sine => "sine",
            SynthClass::Chirp => "chirp",
            SynthClass::NoiseBurst => "noise_burst",
            SynthClass::AmTone => "am_tone",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: Vec<SynthClass>,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Fraction of each class assigned to the test split.
    pub test_frac: f64,
    /// Fraction of each class assigned to the validation split.
    pub val_frac: f64,
    /// Standard deviation of white noise added under every clip.
    pub noise_floor: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: SynthClass::ALL.to_vec(),
            clips_per_class: 500,
            duration_s: 6.0,
            sample_rate: 32_000,
            seed: 0,
            test_frac: 0.2,
            val_frac: 0.0,
            noise_floor: 0.003,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(AsitError::config("synth.classes", "need at least 2 classes"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(AsitError::config("synth.classes", format!("duplicate class {}", c.name())));
            }
        }
        if !(self.duration_s >= 1.0) {
            return Err(AsitError::config("synth.duration_s", "must be >= 1 s"));
        }
        if self.sample_rate < 8_000 {
            return Err(AsitError::config("synth.sample_rate", "must be >= 8000 Hz"));
        }
        if !(self.test_frac >= 0.0 && self.val_frac >= 0.0 && self.test_frac + self.val_frac < 1.0) {
            return Err(AsitError::config("synth.test_frac", "test_frac + val_frac must lie in [0, 1)"));
        }
        if !(self.noise_floor >= 0.0) {
            return Err(AsitError::config("synth.noise_floor", "must be >= 0"));
        }
        Ok(())
    }
}

/// What was drawn for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipLog {
    pub wav_path: String,
    pub class: SynthClass,
    pub amplitude: f64,
    /// Steady frequency for sines, carrier for AM tones.
    pub freq_hz: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub log: Vec<ClipLog>,
}

/// Renders one clip of `class`; deterministic in `rng`.
pub fn render_clip<R: Rng + ?Sized>(class: SynthClass, spec: &SyntheticSpec, rng: &mut R) -> (Vec<f64>, ClipLog) {
    let sr = spec.sample_rate as f64;
    let n = (spec.duration_s * sr).round() as usize;
    let dur = n as f64 / sr;
    let nyq = sr / 2.0;
    let amp = rng.gen_range(0.1..0.8);
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let t = |i: usize| i as f64 / sr;
    let (mut x, freq, detail): (Vec<f64>, Option<f64>, String) = match class {
        SynthClass::Sine => {
            let f = rng.gen_range(200.0..4000.0f64.min(nyq * 0.9));
            let x = (0..n).map(|i| amp * (2.0 * PI * f * t(i) + phase0).sin()).collect();
            (x, Some(f), format!("f={f:.3}"))
        }
        SynthClass::Chirp => {
            let hi = 4000.0f64.min(nyq * 0.9);
            let f0 = rng.gen_range(200.0..hi);
            let mut f1 = rng.gen_range(200.0..hi);
            while (f1 - f0).abs() < 500.0 {
                f1 = rng.gen_range(200.0..hi);
            }
            let k = (f1 - f0) / dur;
            let x = (0..n)
                .map(|i| {
                    let ti = t(i);
                    amp * (2.0 * PI * (f0 * ti + 0.5 * k * ti * ti) + phase0).sin()
                })
                .collect();
            (x, None, format!("f0={f0:.3} f1={f1:.3}"))
        }
        SynthClass::NoiseBurst => {
            let lo = rng.gen_range(200.0..3000.0f64.min(nyq * 0.6));
            let width = rng.gen_range(300.0..2000.0);
            let hi = (lo + width).min(nyq * 0.95);
            let len = rng.gen_range(0.25 * dur..0.5 * dur);
            let onset = rng.gen_range(0.0..dur - len);
            let noise = band_noise(n, sr, lo, hi, rng);
            let ramp = 0.01;
            let x = (0..n)
                .map(|i| {
                    let ti = t(i) - onset;
                    let env = if ti < 0.0 || ti > len {
                        0.0
                    } else {
                        let edge = ti.min(len - ti);
                        if edge < ramp {
                            0.5 - 0.5 * (PI * edge / ramp).cos()
                        } else {
                            1.0
                        }
                    };
                    amp * env * noise[i]
                })
                .collect();
            (x, None, format!("band={lo:.3}-{hi:.3} onset={onset:.4} len={len:.4}"))
        }
        SynthClass::AmTone => {
            let fc = rng.gen_range(300.0..3000.0f64.min(nyq * 0.8));
            let fm = rng.gen_range(4.0..20.0);
            let depth = rng.gen_range(0.5..1.0);
            let x = (0..n)
                .map(|i| {
                    let ti = t(i);
                    let env = (1.0 + depth * (2.0 * PI * fm * ti).sin()) / (1.0 + depth);
                    amp * env * (2.0 * PI * fc * ti + phase0).sin()
                })
                .collect();
            (x, Some(fc), format!("carrier={fc:.3} rate={fm:.3} depth={depth:.3}"))
        }
    };
    if spec.noise_floor > 0.0 {
        for v in x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += spec.noise_floor * z;
        }
    }
    let log = ClipLog {
        wav_path: String::new(),
        class,
        amplitude: amp,
        freq_hz: freq,
        detail: format!("amp={amp:.4} {detail}"),
    };
    (x, log)
}

/// Unit-RMS Gaussian noise restricted to `[lo, hi]` Hz by zeroing FFT bins.
fn band_noise<R: Rng + ?Sized>(n: usize, sr: f64, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let rms = (buf.iter().map(|c| c.re * c.re).sum::<f64>() / n as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 0.0 };
    // Keep peaks inside the 16-bit range after the amplitude draw.
    buf.iter().map(|c| (c.re * scale / 3.0).clamp(-1.0, 1.0)).collect()
}

fn split_for(i: usize, n: usize, spec: &SyntheticSpec) -> Split {
    let n_test = (n as f64 * spec.test_frac).round() as usize;
    let n_val = (n as f64 * spec.val_frac).round() as usize;
    if i >= n - n_test.min(n) {
        Split::Test
    } else if i >= n - (n_test + n_val).min(n) {
        Split::Val
    } else {
        Split::Train
    }
}

/// Writes `<class>/<class>_<i>.wav` files, `manifest.csv` and `synth_log.csv`
/// under `out_dir`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| AsitError::io(out_dir, e))?;
    let mut entries = Vec::new();
    let mut log = Vec::new();
    for &class in &spec.classes {
        if spec.clips_per_class > 0 {
            let dir = out_dir.join(class.name());
            std::fs::create_dir_all(&dir).map_err(|e| AsitError::io(&dir, e))?;
        }
        for i in 0..spec.clips_per_class {
            let mut rng = rng_for(spec.seed, &[class.tag(), i as u64]);
            let (samples, mut entry_log) = render_clip(class, spec, &mut rng);
            let rel = format!("{}/{}_{i:04}.wav", class.name(), class.name());
            write_wav(out_dir.join(&rel), &Waveform::new(samples, spec.sample_rate)?)?;
            log::debug!("{rel}: {}", entry_log.detail);
            entry_log.wav_path = rel.clone();
            entries.push(ManifestEntry {
                wav_path: rel,
                labels: vec![class.name().to_string()],
                split: split_for(i, spec.clips_per_class, spec),
            });
            log.push(entry_log);
        }
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    let manifest_path = out_dir.join("manifest.csv");
    manifest.write(&manifest_path)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let data_err = |e: csv::Error| AsitError::Data(e.to_string());
    w.write_record(["wav_path", "class", "freq_hz", "detail"]).map_err(data_err)?;
    for l in &log {
        let f = l.freq_hz.map(|f| format!("{f}")).unwrap_or_default();
        w.write_record([l.wav_path.as_str(), l.class.name(), &f, &l.detail]).map_err(data_err)?;
    }
    let log_path = out_dir.join("synth_log.csv");
    let bytes = w.into_inner().map_err(|e| AsitError::Data(e.to_string()))?;
    std::fs::write(&log_path, bytes).map_err(|e| AsitError::io(&log_path, e))?;
    log::info!(
        "wrote {} clips of {} classes to {}",
        log.len(),
        spec.classes.len(),
        out_dir.display()
    );
    Ok(SynthOutput {
        manifest_path,
        manifest,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            clips_per_class: 2,
            duration_s: 1.0,
            sample_rate: 16_000,
            seed: 5,
            test_frac: 0.5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn zero_clips_gives_empty_manifest_and_no_wavs() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synthetic_dataset(
            &SyntheticSpec {
                clips_per_class: 0,
                ..small()
            },
            dir.path(),
        )
        .unwrap();
        assert!(out.manifest.entries.is_empty());
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert!(names.iter().all(|n| !n.ends_with(".wav")), "{names:?}");
        assert!(!names.iter().any(|n| n == "sine"));
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let oa = generate_synthetic_dataset(&small(), a.path()).unwrap();
        generate_synthetic_dataset(&small(), b.path()).unwrap();
        assert_eq!(oa.manifest.entries.len(), 8);
        for e in &oa.manifest.entries {
            let x = std::fs::read(a.path().join(&e.wav_path)).unwrap();
            let y = std::fs::read(b.path().join(&e.wav_path)).unwrap();
            assert_eq!(x, y);
        }
        let other = SyntheticSpec { seed: 6, ..small() };
        let c = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&other, c.path()).unwrap();
        let p = &oa.manifest.entries[0].wav_path;
        assert_ne!(std::fs::read(a.path().join(p)).unwrap(), std::fs::read(c.path().join(p)).unwrap());
    }

    #[test]
    fn splits_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synthetic_dataset(&small(), dir.path()).unwrap();
        let m = Manifest::read(&out.manifest_path).unwrap();
        assert_eq!(m.classes().len(), 4);
        assert_eq!(m.split(Split::Test).len(), 4);
        assert_eq!(m.split(Split::Train).len(), 4);
        assert!(dir.path().join("synth_log.csv").exists());
    }

    #[test]
    fn spec_validation() {
        let mut s = small();
        s.classes = vec![SynthClass::Sine];
        assert!(s.validate().is_err());
        let mut s = small();
        s.duration_s = 0.5;
        assert!(s.validate().is_err());
    }
}
