use std::path::Path;

use asit::dsp::{compute_log_mel, filter_center_frequencies, load_and_resample, DspConfig};
use asit::io::*;
use asit::vit::{BackboneConfig, HeadConfig};
use asit::AsitError;

fn synth(dir: &Path, clips_per_class: usize) -> SynthOutput {
    generate_synthetic_dataset(
        &SyntheticSpec {
            clips_per_class,
            duration_s: 1.0,
            sample_rate: 16_000,
            seed: 3,
            test_frac: 0.25,
            ..SyntheticSpec::default()
        },
        dir,
    )
    .unwrap()
}

fn tiny(manifest: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.dsp.sample_rate_hz = 16_000;
    c.dsp.n_mels = 32;
    c.dsp.fft_size = 512;
    c.dsp.target_frames = 64;
    c.backbone = BackboneConfig::custom(1, 16, 2, 8);
    c.heads = HeadConfig {
        hidden: 16,
        bottleneck: 8,
        local_classes: 8,
        global_classes: 12,
    };
    c.augment.mask_block_min = 2;
    c.augment.mask_block_max = 12;
    c.augment.coverage_tolerance = 0.05;
    c.train.batch_size = 4;
    c.train.epochs = 2;
    c.eval.probe_epochs = 30;
    c.eval.finetune_epochs = 1;
    c.eval.finetune_batch = 4;
    c.data.manifest = manifest.display().to_string();
    c
}

#[test]
fn zero_epochs_writes_init_checkpoint_and_header() {
    let data = tempfile::tempdir().unwrap();
    let out = synth(data.path(), 2);
    let mut cfg = tiny(&out.manifest_path);
    cfg.train.epochs = 0;
    let run = tempfile::tempdir().unwrap();
    let s = run_pretrain(&cfg, run.path(), PretrainOptions::default()).unwrap();
    assert_eq!(s.steps, 0);
    assert_eq!(
        std::fs::read_to_string(run.path().join(METRICS_FILE)).unwrap(),
        format!("{METRICS_HEADER}\n")
    );
    let ck = Checkpoint::load(&run.path().join(LAST_CKPT)).unwrap();
    assert_eq!(ck.meta_u64("step").unwrap(), 0);
    assert!(ck.get("teacher.backbone.cls_token").is_some());
    for f in [CONFIG_FILE, "VERSION", "report.txt", "loss.svg"] {
        assert!(run.path().join(f).exists(), "{f}");
    }
    assert!(!run.path().join(LOCK_FILE).exists());
    let snap = parse_config(Some(&run.path().join(CONFIG_FILE)), &[]).unwrap();
    assert_eq!(snap, cfg);
}

#[test]
fn identical_runs_identical_metrics_and_resume_matches() {
    let data = tempfile::tempdir().unwrap();
    let out = synth(data.path(), 3);
    let cfg = tiny(&out.manifest_path);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pretrain(&cfg, a.path(), PretrainOptions::default()).unwrap();
    run_pretrain(&cfg, b.path(), PretrainOptions::default()).unwrap();
    let ma = std::fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.path().join(METRICS_FILE)).unwrap());
    // 2 training clips per class, batch 4: two steps per epoch.
    assert_eq!(read_metrics(&a.path().join(METRICS_FILE)).unwrap().len(), 2 * 2);

    let first = PretrainOptions {
        resume: false,
        stop_after_epochs: Some(1),
    };
    assert_eq!(run_pretrain(&cfg, c.path(), first).unwrap().steps, 2);
    let rest = PretrainOptions {
        resume: true,
        stop_after_epochs: None,
    };
    assert_eq!(run_pretrain(&cfg, c.path(), rest).unwrap().steps, 4);
    assert_eq!(ma, std::fs::read_to_string(c.path().join(METRICS_FILE)).unwrap());
    let ka = Checkpoint::load(&a.path().join(LAST_CKPT)).unwrap();
    let kc = Checkpoint::load(&c.path().join(LAST_CKPT)).unwrap();
    assert_eq!(ka.tensors, kc.tensors);

    let mut other = cfg.clone();
    other.train.base_lr *= 2.0;
    let err = run_pretrain(&other, c.path(), rest).unwrap_err();
    assert!(matches!(err, AsitError::Config { .. }), "{err}");

    let mut two_workers = cfg.clone();
    two_workers.train.workers = 3;
    let d = tempfile::tempdir().unwrap();
    run_pretrain(&two_workers, d.path(), PretrainOptions::default()).unwrap();
    assert_eq!(ma, std::fs::read_to_string(d.path().join(METRICS_FILE)).unwrap());
}

#[test]
fn probe_extract_finetune_from_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    let out = synth(data.path(), 4);
    let cfg = tiny(&out.manifest_path);
    let run = tempfile::tempdir().unwrap();
    run_pretrain(&cfg, run.path(), PretrainOptions::default()).unwrap();
    let ckpt = run.path().join(LAST_CKPT);

    let report_path = run.path().join("probe.txt");
    let rep = run_probe(&cfg, Some(&ckpt), Source::Teacher, Some(&report_path)).unwrap();
    assert_eq!(rep.metric, "accuracy");
    assert_eq!(rep.num_examples, 4);
    assert!((0.0..=1.0).contains(&rep.value));
    let again = asit::eval::EvalReport::from_text(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(again.value, rep.value);
    assert_eq!(run_probe(&cfg, Some(&ckpt), Source::Teacher, None).unwrap(), rep);

    let random = run_probe(&cfg, None, Source::Teacher, None).unwrap();
    assert_eq!(random.num_examples, 4);

    let feats = run.path().join("features.csv");
    let n = run_extract(&cfg, Some(&ckpt), Source::Teacher, &feats).unwrap();
    assert_eq!(n, 16);
    let text = std::fs::read_to_string(&feats).unwrap();
    assert_eq!(text.lines().count(), 17);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 3 + 16);
    let rand_feats = run.path().join("features_random.csv");
    run_extract(&cfg, None, Source::Teacher, &rand_feats).unwrap();
    assert_ne!(text, std::fs::read_to_string(&rand_feats).unwrap());

    let ft = run_finetune(&cfg, Some(&ckpt), Source::Student, None).unwrap();
    assert_eq!(ft.num_examples, 4);

    let missing = run.path().join("nope.ckpt");
    let err = run_probe(&cfg, Some(&missing), Source::Teacher, None).unwrap_err();
    assert!(matches!(err, AsitError::Io { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn mismatched_architecture_is_a_load_error() {
    let data = tempfile::tempdir().unwrap();
    let out = synth(data.path(), 2);
    let cfg = tiny(&out.manifest_path);
    let run = tempfile::tempdir().unwrap();
    let mut zero = cfg.clone();
    zero.train.epochs = 0;
    run_pretrain(&zero, run.path(), PretrainOptions::default()).unwrap();
    let mut ck = Checkpoint::load(&run.path().join(LAST_CKPT)).unwrap();
    ck.tensors.retain(|t| t.name != "teacher.backbone.norm.gamma");
    let broken = run.path().join("broken.ckpt");
    ck.save(&broken).unwrap();
    let err = run_probe(&cfg, Some(&broken), Source::Teacher, None).unwrap_err();
    assert!(matches!(err, AsitError::Load(_)), "{err}");
}

#[test]
fn sweep_makes_five_runs_and_one_plot() {
    let data = tempfile::tempdir().unwrap();
    let out = synth(data.path(), 2);
    let mut cfg = tiny(&out.manifest_path);
    cfg.train.epochs = 1;
    let root = tempfile::tempdir().unwrap();
    let ratios = [0.1, 0.3, 0.5, 0.7, 0.9];
    let points = run_sweep(&cfg, &ratios, &[0], root.path()).unwrap();
    assert_eq!(points.len(), 5);
    let mut dirs: Vec<String> = std::fs::read_dir(root.path())
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_dir())
        .map(|e| e.file_name().into_string().unwrap())
        .collect();
    dirs.sort();
    assert_eq!(dirs, ["ratio_0.10", "ratio_0.30", "ratio_0.50", "ratio_0.70", "ratio_0.90"]);
    for d in &dirs {
        let snap = parse_config(Some(&root.path().join(d).join(CONFIG_FILE)), &[]).unwrap();
        assert_eq!(format!("ratio_{:.2}", snap.augment.corruption_ratio), *d);
        assert!(root.path().join(d).join("probe_report.txt").exists());
    }
    let svgs: Vec<_> = std::fs::read_dir(root.path())
        .unwrap()
        .filter_map(|e| e.unwrap().file_name().into_string().ok())
        .filter(|n| n.ends_with(".svg"))
        .collect();
    assert_eq!(svgs, ["sweep.svg"]);
    assert_eq!(std::fs::read_to_string(root.path().join("sweep.csv")).unwrap().lines().count(), 6);
}

#[test]
fn sine_clip_peaks_at_logged_frequency() {
    let data = tempfile::tempdir().unwrap();
    let out = generate_synthetic_dataset(
        &SyntheticSpec {
            classes: vec![SynthClass::Sine, SynthClass::Chirp],
            clips_per_class: 6,
            duration_s: 1.0,
            seed: 11,
            ..SyntheticSpec::default()
        },
        data.path(),
    )
    .unwrap();
    let dsp = DspConfig::default();
    let centers = filter_center_frequencies(&dsp);
    for l in out.log.iter().filter(|l| l.class == SynthClass::Sine) {
        let f = l.freq_hz.unwrap();
        let w = load_and_resample(data.path().join(&l.wav_path), dsp.sample_rate_hz).unwrap();
        let s = compute_log_mel(&w, &dsp).unwrap();
        let mean = s.mean_over_time();
        let arg = (0..mean.len()).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        let expect = (0..centers.len())
            .min_by(|&a, &b| (centers[a] - f).abs().total_cmp(&(centers[b] - f).abs()))
            .unwrap();
        assert!(arg.abs_diff(expect) <= 1, "f {f}: argmax {arg}, nearest filter {expect}");
    }
}
