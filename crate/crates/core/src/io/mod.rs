//! Configuration, datasets, checkpoints, metrics and run directories.

mod checkpoint;
mod config;
mod dataset;
mod manifest;
mod metrics;
mod plot;
mod run;
mod synth;

pub use checkpoint::{restore_training, training_checkpoint, Checkpoint, Element, Tensor, TensorData, CKPT_MAGIC, CKPT_VERSION};
pub use config::{parse_config, parse_config_text, DataConfig, RunConfig};
pub use dataset::{load_spectrograms, par_map, NormStats, PretrainStream};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use metrics::{parse_metrics, read_metrics, MetricsRow, MetricsWriter, METRICS_HEADER};
pub use plot::{emit_plots, emit_sweep_plot, line_chart_svg, Series};
pub use run::{
    describe_run_dir, features, load_backbone, load_manifest, run_extract, run_finetune, run_pretrain, run_probe,
    run_sweep, sweep_dir_name, LoadedBackbone, PretrainOptions, PretrainSummary, RunLock, Source, SweepPoint, BEST_CKPT, CODE_VERSION,
    CONFIG_FILE, LAST_CKPT, LOCK_FILE, METRICS_FILE,
};
pub use synth::{generate_synthetic_dataset, render_clip, ClipLog, SynthClass, SynthOutput, SyntheticSpec};
