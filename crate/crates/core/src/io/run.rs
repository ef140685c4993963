//! Run directories: pretraining, probing, finetuning, extraction, sweeps.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::checkpoint::{restore_training, training_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::dataset::{load_spectrograms, par_map, NormStats, PretrainStream};
use super::manifest::{Manifest, ManifestEntry, Split};
use super::metrics::{MetricsRow, MetricsWriter};
use super::plot::{emit_plots, emit_sweep_plot, Series};
use crate::distill::{Pretrainer, TrainSample};
use crate::dsp::LogMelSpectrogram;
use crate::error::{AsitError, Result};
use crate::eval::{extract_features, finetune, linear_probe, EvalReport, LabeledClip};
use crate::rng::rng_for;
use crate::vit::{AsitModel, Backbone, Parameters};

pub const CODE_VERSION: &str = concat!("asit-core ", env!("CARGO_PKG_VERSION"));
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LOCK_FILE: &str = ".lock";

const TAG_INIT: u64 = 0x11;
const TAG_VAL: u64 = 0x7A;

/// Exclusive ownership of a run directory for the life of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| AsitError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                AsitError::io(&path, std::io::Error::new(e.kind(), "run directory is locked by another process"))
            } else {
                AsitError::io(&path, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| AsitError::io(path, e))
}

/// Config snapshot plus code version tag.
pub fn describe_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    cfg.save(&dir.join(CONFIG_FILE))?;
    write_text(
        &dir.join("VERSION"),
        &format!("{CODE_VERSION}\nconfig_fingerprint = {}\n", cfg.fingerprint()),
    )
}

pub fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    if cfg.data.manifest.is_empty() {
        return Err(AsitError::config("data.manifest", "no dataset manifest given"));
    }
    Manifest::read(Path::new(&cfg.data.manifest))
}

fn train_entries<'a>(m: &'a Manifest, cfg: &RunConfig) -> Vec<&'a ManifestEntry> {
    let mut e = m.split(Split::Train);
    if cfg.data.max_clips > 0 {
        e.truncate(cfg.data.max_clips);
    }
    e
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub seconds: f64,
}

fn meta_for(epoch: usize, norm: &NormStats) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("epoch".to_string(), epoch.to_string()),
        ("norm_mean".to_string(), norm.mean.to_string()),
        ("norm_std".to_string(), norm.std.to_string()),
        ("code_version".to_string(), CODE_VERSION.to_string()),
    ])
}

fn validation_loss(tr: &Pretrainer, val: &[TrainSample], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in val.chunks(batch.max(1)) {
        sum += tr.compute_gradients(chunk)?.total * chunk.len() as f64;
    }
    Ok(sum / val.len() as f64)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PretrainOptions {
    /// Continue from `last.ckpt` when it exists.
    pub resume: bool,
    /// Return after this many epochs of this invocation, checkpointing first.
    pub stop_after_epochs: Option<usize>,
}

/// Pretrains from `cfg` into `run_dir`.
pub fn run_pretrain(cfg: &RunConfig, run_dir: &Path, opts: PretrainOptions) -> Result<PretrainSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let _lock = RunLock::acquire(run_dir)?;
    let manifest = load_manifest(cfg)?;
    let entries = train_entries(&manifest, cfg);
    if entries.is_empty() {
        return Err(AsitError::DegenerateSplit("manifest has no training clips".into()));
    }
    let workers = cfg.train.workers;
    let raw = load_spectrograms(&manifest, &entries, &cfg.dsp, workers)?;
    let norm = NormStats::from_corpus(&raw)?;
    let clips = norm.apply(&raw, cfg.dsp.norm_two_std)?;
    drop(raw);
    let val_clips = {
        let val = manifest.split(Split::Val);
        if val.is_empty() {
            Vec::new()
        } else {
            norm.apply(&load_spectrograms(&manifest, &val, &cfg.dsp, workers)?, cfg.dsp.norm_two_std)?
        }
    };

    let grid = cfg.grid();
    let stream = PretrainStream {
        clips: &clips,
        aug: &cfg.augment,
        target_frames: cfg.dsp.target_frames,
        patch: cfg.backbone.patch_size,
        batch_size: cfg.train.batch_size,
        seed: cfg.train.seed,
    };
    let per_epoch = stream.batches_per_epoch();
    let total_steps = (cfg.train.epochs * per_epoch) as u64;
    let model = AsitModel::init(&cfg.backbone, &cfg.heads, &grid, &mut rng_for(cfg.train.seed, &[TAG_INIT]));
    let mut tr = Pretrainer::new(model, grid, cfg.distill.clone(), cfg.train.clone(), total_steps)?;
    let config_text = cfg.to_text();
    let last_path = run_dir.join(LAST_CKPT);
    let best_path = run_dir.join(BEST_CKPT);
    let metrics_path = run_dir.join(METRICS_FILE);

    let mut start_epoch = 0usize;
    let mut best_val = None;
    let mut metrics = if opts.resume && last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        if ck.config_text != config_text {
            return Err(AsitError::config(
                "<resume>",
                format!("{} was written with a different config", last_path.display()),
            ));
        }
        restore_training(&mut tr, &ck)?;
        start_epoch = ck.meta_u64("epoch")? as usize;
        best_val = ck.meta.get("best_val_loss").and_then(|v| v.parse().ok());
        log::info!("resuming at epoch {start_epoch}, step {}", tr.state.step);
        MetricsWriter::resume(&metrics_path, tr.state.step)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };
    describe_run_dir(run_dir, cfg)?;
    log::info!(
        "pretraining {} clips, {} steps/epoch, {} epochs, {} parameters",
        clips.len(),
        per_epoch,
        cfg.train.epochs,
        tr.state.student.param_count()
    );

    let val_samples: Vec<TrainSample> = {
        let v = PretrainStream {
            clips: &val_clips,
            seed: cfg.train.seed ^ TAG_VAL,
            ..stream
        };
        par_map(&(0..val_clips.len()).collect::<Vec<_>>(), workers, |&i| v.sample(i, 0))?
    };

    let save = |tr: &Pretrainer, epoch: usize, best: Option<f64>, path: &Path| -> Result<()> {
        let mut meta = meta_for(epoch, &norm);
        if let Some(b) = best {
            meta.insert("best_val_loss".into(), b.to_string());
        }
        training_checkpoint(tr, &config_text, meta).save(path)
    };

    if cfg.train.epochs == 0 {
        save(&tr, 0, None, &last_path)?;
    }
    let mut last_loss = None;
    let end_epoch = opts
        .stop_after_epochs
        .map_or(cfg.train.epochs, |n| (start_epoch + n).min(cfg.train.epochs));
    for epoch in start_epoch..end_epoch {
        let res = stream.run_epoch(epoch as u64, 0, workers, cfg.train.queue_depth, |b, batch| {
            let report = tr.train_step(&batch)?;
            metrics.append(&MetricsRow::from(&report))?;
            last_loss = Some(report.total);
            if b + 1 == per_epoch || report.step % 20 == 0 {
                log::info!(
                    "epoch {epoch} step {} loss {:.5} (recons {:.4} lcl {:.4} gcl {:.4})",
                    report.step,
                    report.total,
                    report.parts.recons,
                    report.parts.lcl,
                    report.parts.gcl
                );
            }
            Ok(())
        });
        metrics.flush()?;
        if let Err(e) = res {
            if matches!(e, AsitError::NumericFault { .. }) {
                write_text(&run_dir.join("fault.txt"), &format!("{e}\nepoch = {epoch}\nstep = {}\n", tr.state.step))?;
                save(&tr, epoch, best_val, &run_dir.join("fault.ckpt"))?;
            }
            return Err(e);
        }
        let done = epoch + 1;
        if !val_samples.is_empty() {
            let v = validation_loss(&tr, &val_samples, cfg.train.batch_size)?;
            log::info!("epoch {epoch} validation loss {v:.5}");
            if best_val.map_or(true, |b| v < b) {
                best_val = Some(v);
                save(&tr, done, best_val, &best_path)?;
            }
        }
        if done % cfg.train.checkpoint_every == 0 || done == end_epoch {
            save(&tr, done, best_val, &last_path)?;
        }
    }
    let summary = PretrainSummary {
        run_dir: run_dir.to_path_buf(),
        steps: tr.state.step,
        epochs: end_epoch.max(start_epoch),
        final_loss: last_loss,
        best_val_loss: best_val,
        seconds: started.elapsed().as_secs_f64(),
    };
    let fmt = |v: Option<f64>| v.map_or("none".to_string(), |v| v.to_string());
    write_text(
        &run_dir.join("report.txt"),
        &format!(
            "kind = pretrain\nsteps = {}\nepochs = {}\nclips = {}\nfinal_loss = {}\nbest_val_loss = {}\nseconds = {:.1}\nfingerprint = {}\n",
            summary.steps,
            summary.epochs,
            clips.len(),
            fmt(summary.final_loss),
            fmt(summary.best_val_loss),
            summary.seconds,
            cfg.fingerprint()
        ),
    )?;
    emit_plots(&metrics_path, run_dir)?;
    Ok(summary)
}

/// Which weights of a pretraining checkpoint to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Teacher,
    Student,
}

/// A backbone ready for feature extraction, with the normalization its
/// inputs need.
pub struct LoadedBackbone {
    pub backbone: Backbone<f32>,
    /// Architecture and front end the backbone was built with.
    pub cfg: RunConfig,
    pub norm: NormStats,
    pub origin: String,
}

/// Backbone from a checkpoint (projection heads are dropped), or a random
/// initialization from `cfg` normalized with `train` statistics.
pub fn load_backbone(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    source: Source,
    train_raw: &[LogMelSpectrogram],
) -> Result<LoadedBackbone> {
    match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let ck_cfg = RunConfig::from_text(&ck.config_text)
                .map_err(|e| AsitError::Load(format!("{}: embedded config: {e}", path.display())))?;
            let mut arch = cfg.clone();
            arch.dsp = ck_cfg.dsp.clone();
            arch.backbone = ck_cfg.backbone.clone();
            let mut backbone = Backbone::init(&arch.backbone, &arch.grid(), &mut rng_for(0, &[TAG_INIT]));
            let prefix = match source {
                Source::Teacher => "teacher.backbone",
                Source::Student => "student.backbone",
            };
            ck.load_params(prefix, &mut backbone)?;
            let norm = NormStats {
                mean: ck.meta_f64("norm_mean")?,
                std: ck.meta_f64("norm_std")?,
            };
            Ok(LoadedBackbone {
                backbone,
                cfg: arch,
                norm,
                origin: format!("{} ({prefix})", path.display()),
            })
        }
        None => {
            let backbone = Backbone::init(&cfg.backbone, &cfg.grid(), &mut rng_for(cfg.train.seed, &[TAG_INIT]));
            Ok(LoadedBackbone {
                backbone,
                cfg: cfg.clone(),
                norm: NormStats::from_corpus(train_raw)?,
                origin: "random init".into(),
            })
        }
    }
}

/// Pooled features for `clips` (already normalized), extracted in parallel
/// chunks with the model shared read-only.
pub fn features(lb: &LoadedBackbone, clips: &[LogMelSpectrogram], workers: usize) -> Result<ndarray::Array2<f64>> {
    let grid = lb.cfg.grid();
    let chunk = lb.cfg.eval.feature_batch.max(1);
    let groups: Vec<&[LogMelSpectrogram]> = clips.chunks(chunk).collect();
    let parts = par_map(&groups, workers, |g| {
        let refs: Vec<&ndarray::Array2<f64>> = g.iter().map(|c| &c.values).collect();
        extract_features(&lb.backbone, &grid, &refs, lb.cfg.eval.pooling, chunk)
    })?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    if views.is_empty() {
        return Ok(ndarray::Array2::zeros((0, lb.backbone.embed_dim())));
    }
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| AsitError::Data(e.to_string()))
}

struct SplitData {
    raw: Vec<LogMelSpectrogram>,
    labels: Vec<Vec<usize>>,
}

fn split_data(m: &Manifest, entries: &[&ManifestEntry], cfg: &RunConfig) -> Result<SplitData> {
    Ok(SplitData {
        raw: load_spectrograms(m, entries, &cfg.dsp, cfg.train.workers)?,
        labels: entries.iter().map(|e| m.label_indices(e)).collect(),
    })
}

/// Linear probe on frozen features; writes the report to `out` when given.
pub fn run_probe(cfg: &RunConfig, checkpoint: Option<&Path>, source: Source, out: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    if let Some(p) = checkpoint {
        if !p.exists() {
            return Err(AsitError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
        }
    }
    let m = load_manifest(cfg)?;
    let classes = m.classes().len();
    let train_e = train_entries(&m, cfg);
    let test_e = m.split(Split::Test);
    if train_e.is_empty() || test_e.is_empty() {
        return Err(AsitError::DegenerateSplit("probe needs train and test clips".into()));
    }
    let mut probe_cfg = cfg.clone();
    if let Some(p) = checkpoint {
        // The front end must match the checkpoint before loading audio.
        let ck_cfg = RunConfig::from_text(&Checkpoint::load(p)?.config_text)?;
        probe_cfg.dsp = ck_cfg.dsp;
    }
    let train = split_data(&m, &train_e, &probe_cfg)?;
    let test = split_data(&m, &test_e, &probe_cfg)?;
    let lb = load_backbone(&probe_cfg, checkpoint, source, &train.raw)?;
    let two = lb.cfg.dsp.norm_two_std;
    let w = cfg.train.workers;
    let xtr = features(&lb, &lb.norm.apply(&train.raw, two)?, w)?;
    let xte = features(&lb, &lb.norm.apply(&test.raw, two)?, w)?;
    let mut report = linear_probe(&xtr, &train.labels, &xte, &test.labels, classes, &cfg.eval)?;
    report.fingerprint = cfg.fingerprint();
    report.notes.push(("backbone".into(), lb.origin.clone()));
    report.notes.push(("train_clips".into(), train.raw.len().to_string()));
    if let Some(o) = out {
        write_text(o, &report.to_text())?;
    }
    Ok(report)
}

/// Full-model finetuning. Uses the manifest's validation split, or carves
/// `eval.val_frac` of the training clips when there is none.
pub fn run_finetune(cfg: &RunConfig, checkpoint: Option<&Path>, source: Source, out: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let m = load_manifest(cfg)?;
    let classes = m.classes().len();
    let mut train_e = train_entries(&m, cfg);
    let mut val_e = m.split(Split::Val);
    let test_e = m.split(Split::Test);
    if val_e.is_empty() {
        train_e.shuffle(&mut rng_for(cfg.eval.seed, &[TAG_VAL]));
        let n_val = ((train_e.len() as f64 * cfg.eval.val_frac).round() as usize).clamp(1, train_e.len().saturating_sub(1).max(1));
        val_e = train_e.split_off(train_e.len() - n_val);
    }
    let mut ft_cfg = cfg.clone();
    if let Some(p) = checkpoint {
        ft_cfg.dsp = RunConfig::from_text(&Checkpoint::load(p)?.config_text)?.dsp;
    }
    let train = split_data(&m, &train_e, &ft_cfg)?;
    let lb = load_backbone(&ft_cfg, checkpoint, source, &train.raw)?;
    let two = lb.cfg.dsp.norm_two_std;
    let labeled = |d: SplitData| -> Result<Vec<LabeledClip>> {
        Ok(lb
            .norm
            .apply(&d.raw, two)?
            .into_iter()
            .zip(d.labels)
            .map(|(spectrogram, labels)| LabeledClip { spectrogram, labels })
            .collect())
    };
    let val = labeled(split_data(&m, &val_e, &ft_cfg)?)?;
    let test = labeled(split_data(&m, &test_e, &ft_cfg)?)?;
    let train = labeled(train)?;
    let grid = lb.cfg.grid();
    let (mut report, _) = finetune(lb.backbone.clone(), &grid, &train, &val, &test, classes, &cfg.eval)?;
    report.fingerprint = cfg.fingerprint();
    report.notes.push(("backbone".into(), lb.origin.clone()));
    if let Some(o) = out {
        write_text(o, &report.to_text())?;
    }
    Ok(report)
}

/// Writes `wav_path,split,label_list,f0..` rows for every manifest clip.
pub fn run_extract(cfg: &RunConfig, checkpoint: Option<&Path>, source: Source, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let m = load_manifest(cfg)?;
    let mut ex_cfg = cfg.clone();
    if let Some(p) = checkpoint {
        ex_cfg.dsp = RunConfig::from_text(&Checkpoint::load(p)?.config_text)?.dsp;
    }
    let all: Vec<&ManifestEntry> = m.entries.iter().collect();
    let raw = load_spectrograms(&m, &all, &ex_cfg.dsp, cfg.train.workers)?;
    let train_raw: Vec<LogMelSpectrogram> = all
        .iter()
        .zip(&raw)
        .filter(|(e, _)| e.split == Split::Train)
        .map(|(_, r)| r.clone())
        .collect();
    let lb = load_backbone(&ex_cfg, checkpoint, source, if train_raw.is_empty() { &raw } else { &train_raw })?;
    let x = features(&lb, &lb.norm.apply(&raw, lb.cfg.dsp.norm_two_std)?, cfg.train.workers)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| AsitError::Data(e.to_string());
    let mut header = vec!["wav_path".to_string(), "split".into(), "label_list".into()];
    header.extend((0..x.ncols()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(err)?;
    for (e, row) in all.iter().zip(x.rows()) {
        let mut rec = vec![e.wav_path.clone(), e.split.as_str().to_string(), e.labels.join(";")];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| AsitError::Data(e.to_string()))?;
    std::fs::write(out, bytes).map_err(|e| AsitError::io(out, e))?;
    Ok(all.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub ratio: f64,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub metric: String,
    pub value: f64,
}

pub fn sweep_dir_name(ratio: f64, seed: u64, multi_seed: bool) -> String {
    if multi_seed {
        format!("ratio_{ratio:.2}_seed{seed}")
    } else {
        format!("ratio_{ratio:.2}")
    }
}

/// Pretrains and probes once per (ratio, seed), then writes `sweep.csv` and
/// `sweep.svg` under `root`. Both the zero-fill and the alien-block coverage
/// follow the swept ratio.
pub fn run_sweep(cfg: &RunConfig, ratios: &[f64], seeds: &[u64], root: &Path) -> Result<Vec<SweepPoint>> {
    if ratios.is_empty() || seeds.is_empty() {
        return Err(AsitError::Argument("sweep needs at least one ratio and one seed".into()));
    }
    std::fs::create_dir_all(root).map_err(|e| AsitError::io(root, e))?;
    let multi = seeds.len() > 1;
    let mut points = Vec::new();
    for &seed in seeds {
        for &ratio in ratios {
            let mut c = cfg.clone();
            c.augment.corruption_ratio = ratio;
            c.augment.alien_ratio = ratio;
            c.train.seed = seed;
            c.eval.seed = seed;
            c.validate()?;
            let dir = root.join(sweep_dir_name(ratio, seed, multi));
            log::info!("sweep: ratio {ratio} seed {seed} -> {}", dir.display());
            run_pretrain(&c, &dir, PretrainOptions::default())?;
            let report = run_probe(&c, Some(&dir.join(LAST_CKPT)), Source::Teacher, Some(&dir.join("probe_report.txt")))?;
            points.push(SweepPoint {
                ratio,
                seed,
                run_dir: dir,
                metric: report.metric.clone(),
                value: report.value,
            });
        }
    }
    let mut csv_text = String::from("ratio,seed,metric,value,run_dir\n");
    for p in &points {
        csv_text.push_str(&format!("{},{},{},{},{}\n", p.ratio, p.seed, p.metric, p.value, p.run_dir.display()));
    }
    write_text(&root.join("sweep.csv"), &csv_text)?;
    let metric = points[0].metric.clone();
    let mut series: Vec<Series> = Vec::new();
    if multi {
        for &seed in seeds {
            series.push(Series {
                name: format!("seed {seed}"),
                points: points.iter().filter(|p| p.seed == seed).map(|p| (p.ratio, p.value)).collect(),
                markers: true,
            });
        }
    }
    series.push(Series {
        name: if multi { "mean".into() } else { metric.clone() },
        points: ratios
            .iter()
            .map(|&r| {
                let v: Vec<f64> = points.iter().filter(|p| p.ratio == r).map(|p| p.value).collect();
                (r, v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect(),
        markers: true,
    });
    emit_sweep_plot(&root.join("sweep.svg"), &metric, &series)?;
    Ok(points)
}
