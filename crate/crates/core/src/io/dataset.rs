//! Spectrogram corpus loading and the pretraining batch stream.

use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::Rng;

use super::manifest::{Manifest, ManifestEntry};
use crate::augment::{make_views, AugmentConfig};
use crate::distill::{prepare_sample, TrainSample};
use crate::dsp::{compute_log_mel, corpus_stats, load_and_resample, normalize, DspConfig, LogMelSpectrogram};
use crate::error::{AsitError, Result};
use crate::rng::rng_for;

const TAG_ORDER: u64 = 0x0D;
const TAG_SAMPLE: u64 = 0x5A;

/// Maps `f` over `items` on up to `workers` scoped threads, keeping order.
pub fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Result<Vec<U>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Raw (unnormalized) log-mel spectrograms for `entries`.
pub fn load_spectrograms(
    manifest: &Manifest,
    entries: &[&ManifestEntry],
    dsp: &DspConfig,
    workers: usize,
) -> Result<Vec<LogMelSpectrogram>> {
    par_map(entries, workers, |e| {
        let path = manifest.resolve(e);
        let w = load_and_resample(&path, dsp.sample_rate_hz)?;
        compute_log_mel(&w, dsp).map_err(|err| match err {
            AsitError::TooShort { what, got, need } => AsitError::Data(format!(
                "{}: {what} has {got}, needs at least {need}",
                path.display()
            )),
            other => other,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn from_corpus(clips: &[LogMelSpectrogram]) -> Result<Self> {
        let (mean, std) = corpus_stats(clips)?;
        if !(std > 0.0) {
            return Err(AsitError::Data("training corpus has zero variance".into()));
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, clips: &[LogMelSpectrogram], two_std: bool) -> Result<Vec<LogMelSpectrogram>> {
        clips.iter().map(|c| normalize(c, self.mean, self.std, two_std)).collect()
    }
}

/// Deterministic source of pretraining batches. Every sample depends only on
/// `(seed, clip, epoch)`, so batches are identical whatever the worker count.
pub struct PretrainStream<'a> {
    pub clips: &'a [LogMelSpectrogram],
    pub aug: &'a AugmentConfig,
    pub target_frames: usize,
    pub patch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl PretrainStream<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.clips.len().div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.clips.len()).collect();
        order.shuffle(&mut rng_for(self.seed, &[TAG_ORDER, epoch]));
        order
    }

    /// Two views of clip `i`, corrupted with alien material from other clips.
    pub fn sample(&self, i: usize, epoch: u64) -> Result<TrainSample> {
        let mut rng = rng_for(self.seed, &[TAG_SAMPLE, i as u64, epoch]);
        let pair = make_views(&self.clips[i], self.aug, self.target_frames, i as u64, &mut rng)?;
        let n = self.clips.len();
        let mut alien = || -> Result<LogMelSpectrogram> {
            let j = if n > 1 { (i + rng.gen_range(1..n)) % n } else { i };
            Ok(make_views(&self.clips[j], self.aug, self.target_frames, j as u64, &mut rng)?.view_a)
        };
        let (a, b) = (alien()?, alien()?);
        prepare_sample(&pair, [&a, &b], self.aug, self.patch, &mut rng)
    }

    pub fn batch(&self, order: &[usize], index: usize, epoch: u64, workers: usize) -> Result<Vec<TrainSample>> {
        let start = index * self.batch_size;
        let ids = &order[start..(start + self.batch_size).min(order.len())];
        par_map(ids, workers, |&i| self.sample(i, epoch))
    }

    /// Feeds batches `first_batch..` of `epoch` to `consume` in order. With
    /// more than one worker a producer thread prepares batches ahead through a
    /// queue of `queue_depth`.
    pub fn run_epoch(
        &self,
        epoch: u64,
        first_batch: usize,
        workers: usize,
        queue_depth: usize,
        mut consume: impl FnMut(usize, Vec<TrainSample>) -> Result<()>,
    ) -> Result<()> {
        let order = self.epoch_order(epoch);
        let n = self.batches_per_epoch();
        if workers <= 1 {
            for b in first_batch..n {
                consume(b, self.batch(&order, b, epoch, 1)?)?;
            }
            return Ok(());
        }
        std::thread::scope(|s| {
            let (tx, rx) = sync_channel::<Result<Vec<TrainSample>>>(queue_depth.max(1));
            let order = &order;
            s.spawn(move || {
                for b in first_batch..n {
                    let batch = self.batch(order, b, epoch, workers - 1);
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
            for b in first_batch..n {
                let batch = rx
                    .recv()
                    .map_err(|_| AsitError::Data("batch producer stopped".into()))??;
                consume(b, batch)?;
            }
            Ok(())
        })
    }
}
