//! `asit` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asit::io::{
    emit_plots, generate_synthetic_dataset, parse_config, run_extract, run_finetune, run_pretrain, run_probe, run_sweep,
    PretrainOptions, RunConfig, Source, SynthClass, SyntheticSpec, LAST_CKPT,
};
use asit::{AsitError, Result};

#[derive(Parser)]
#[command(name = "asit", version, about = "Self-supervised audio spectrogram transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Configuration sources shared by every training and evaluation command.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key-value config file (`section.key = value` lines).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set distill.tau_t=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set data.manifest=...`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Shorthand for `--set augment.corruption_ratio=...`.
    #[arg(long)]
    corruption_ratio: Option<f64>,
    /// Shorthand for `--set train.epochs=...`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Shorthand for `--set train.seed=...`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set train.workers=...`.
    #[arg(long)]
    workers: Option<usize>,
    /// Root for run directories without an explicit `--run-dir`.
    #[arg(long, env = "ASIT_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(m) = &self.manifest {
            overrides.push(format!("data.manifest={}", toml_string(&m.display().to_string())));
        }
        if let Some(r) = self.corruption_ratio {
            overrides.push(format!("augment.corruption_ratio={r:?}"));
        }
        if let Some(e) = self.epochs {
            overrides.push(format!("train.epochs={e}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("train.workers={w}"));
        }
        // Explicit --set entries are applied last and win.
        overrides.extend(self.set.iter().cloned());
        parse_config(self.config.as_deref(), &overrides)
    }

    fn run_dir(&self, explicit: &Option<PathBuf>, kind: &str, cfg: &RunConfig) -> PathBuf {
        explicit
            .clone()
            .unwrap_or_else(|| self.run_root.join(format!("{kind}-{}", cfg.fingerprint())))
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

#[derive(Args)]
struct ModelArgs {
    /// Pretraining checkpoint; its projection heads are ignored.
    #[arg(long, conflicts_with = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Pretraining run directory; uses its `last.ckpt`.
    #[arg(long, conflicts_with_all = ["checkpoint", "random_init"])]
    from_run: Option<PathBuf>,
    /// Evaluate a randomly initialized backbone instead.
    #[arg(long)]
    random_init: bool,
    /// Use the student weights rather than the teacher's.
    #[arg(long)]
    student: bool,
}

impl ModelArgs {
    fn checkpoint(&self) -> Result<Option<PathBuf>> {
        match (&self.checkpoint, &self.from_run, self.random_init) {
            (Some(c), _, _) => Ok(Some(c.clone())),
            (None, Some(r), _) => Ok(Some(r.join(LAST_CKPT))),
            (None, None, true) => Ok(None),
            (None, None, false) => Err(AsitError::Argument(
                "give --checkpoint, --from-run or --random-init".into(),
            )),
        }
    }

    fn source(&self) -> Source {
        if self.student {
            Source::Student
        } else {
            Source::Teacher
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic four-class corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        clips_per_class: usize,
        #[arg(long, default_value_t = 6.0)]
        duration: f64,
        #[arg(long, default_value_t = 32_000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        test_frac: f64,
        #[arg(long, default_value_t = 0.0)]
        val_frac: f64,
        /// Comma-separated subset of sine,chirp,noise_burst,am_tone.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
    /// Self-supervised pretraining into a run directory.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop (with a checkpoint) after this many epochs of this invocation.
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Linear probe on frozen backbone features.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Report file (default: next to the checkpoint, or in the run root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finetune backbone plus a new linear head.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write pooled backbone features for every manifest clip as CSV.
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss and schedule plots from a metrics CSV.
    Plot {
        /// `metrics.csv` or a run directory containing one.
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain and probe at several corruption ratios.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5, 0.7, 0.9])]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seeds: Vec<u64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn parse_class(name: &str) -> Result<SynthClass> {
    SynthClass::ALL
        .into_iter()
        .find(|c| c.name() == name.trim())
        .ok_or_else(|| AsitError::config("synth.classes", format!("unknown class `{name}`")))
}

fn report_path(out: &Option<PathBuf>, ckpt: &Option<PathBuf>, root: &Path, name: &str) -> Result<PathBuf> {
    if let Some(o) = out {
        return Ok(o.clone());
    }
    let dir = match ckpt.as_ref().and_then(|c| c.parent()) {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => root.to_path_buf(),
    };
    std::fs::create_dir_all(&dir).map_err(|e| AsitError::io(&dir, e))?;
    Ok(dir.join(name))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            clips_per_class,
            duration,
            sample_rate,
            seed,
            test_frac,
            val_frac,
            classes,
        } => {
            let classes = if classes.is_empty() {
                SynthClass::ALL.to_vec()
            } else {
                classes.iter().map(|c| parse_class(c)).collect::<Result<_>>()?
            };
            let spec = SyntheticSpec {
                classes,
                clips_per_class,
                duration_s: duration,
                sample_rate,
                seed,
                test_frac,
                val_frac,
                ..SyntheticSpec::default()
            };
            let o = generate_synthetic_dataset(&spec, &out)?;
            println!("{} clips, manifest {}", o.log.len(), o.manifest_path.display());
        }
        Command::Pretrain {
            cfg,
            run_dir,
            resume,
            stop_after_epochs,
        } => {
            let c = cfg.load()?;
            let dir = cfg.run_dir(&run_dir, "pretrain", &c);
            let s = run_pretrain(
                &c,
                &dir,
                PretrainOptions {
                    resume,
                    stop_after_epochs,
                },
            )?;
            println!(
                "{} steps in {:.1}s, final loss {}, run dir {}",
                s.steps,
                s.seconds,
                s.final_loss.map_or("n/a".into(), |v| format!("{v:.5}")),
                dir.display()
            );
        }
        Command::Probe { cfg, model, out } => {
            let c = cfg.load()?;
            let ckpt = model.checkpoint()?;
            let path = report_path(&out, &ckpt, &cfg.run_root, "probe_report.txt")?;
            let r = run_probe(&c, ckpt.as_deref(), model.source(), Some(&path))?;
            println!("{} = {:.4} on {} clips ({})", r.metric, r.value, r.num_examples, path.display());
        }
        Command::Finetune { cfg, model, out } => {
            let c = cfg.load()?;
            let ckpt = model.checkpoint()?;
            let path = report_path(&out, &ckpt, &cfg.run_root, "finetune_report.txt")?;
            let r = run_finetune(&c, ckpt.as_deref(), model.source(), Some(&path))?;
            println!("{} = {:.4} on {} clips ({})", r.metric, r.value, r.num_examples, path.display());
        }
        Command::Extract { cfg, model, out } => {
            let c = cfg.load()?;
            let ckpt = model.checkpoint()?;
            let n = run_extract(&c, ckpt.as_deref(), model.source(), &out)?;
            println!("{n} feature rows written to {}", out.display());
        }
        Command::Plot { metrics, out } => {
            let csv = if metrics.is_dir() {
                metrics.join(asit::io::METRICS_FILE)
            } else {
                metrics
            };
            let dir = out.unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
            for f in emit_plots(&csv, &dir)? {
                println!("{}", f.display());
            }
        }
        Command::Sweep {
            cfg,
            ratios,
            seeds,
            run_dir,
        } => {
            let c = cfg.load()?;
            let root = cfg.run_dir(&run_dir, "sweep", &c);
            for p in run_sweep(&c, &ratios, &seeds, &root)? {
                println!("ratio {:.2} seed {}: {} = {:.4}", p.ratio, p.seed, p.metric, p.value);
            }
            println!("plot: {}", root.join("sweep.svg").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
