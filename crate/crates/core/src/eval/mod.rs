//! Downstream evaluation: frozen-feature probes, finetuning and metrics.

mod features;
mod finetune;
mod metrics;
mod probe;

use serde::{Deserialize, Serialize};

use crate::dsp::LogMelSpectrogram;
use crate::error::{AsitError, Result};

pub use features::{extract_features, fit_to_grid, Pooling};
pub use finetune::{finetune, Classifier};
pub use metrics::{accuracy, average_precision, mean_average_precision, rank_descending, MapResult};
pub use probe::{evaluate_scores, fit_linear, linear_probe, LinearClassifier};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub spectrogram: LogMelSpectrogram,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pooling: Pooling,
    pub multilabel: bool,
    /// Probe step as a fraction of the largest stable step; must lie in (0, 2).
    pub probe_lr: f64,
    pub probe_epochs: usize,
    pub probe_wd: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_wd: f64,
    pub finetune_batch: usize,
    /// Share of the training split held out for model selection when the
    /// manifest has no `val` rows.
    pub val_frac: f64,
    /// Clips per forward pass during feature extraction.
    pub feature_batch: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pooling: Pooling::Cls,
            multilabel: false,
            probe_lr: 1.0,
            probe_epochs: 1000,
            probe_wd: 1e-4,
            finetune_epochs: 5,
            finetune_lr: 1e-4,
            finetune_wd: 0.01,
            finetune_batch: 8,
            val_frac: 0.2,
            feature_batch: 16,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.probe_lr > 0.0 && self.probe_lr < 2.0) {
            return Err(AsitError::config("eval.probe_lr", "must lie in (0, 2)"));
        }
        if !(self.probe_wd >= 0.0 && self.probe_wd.is_finite()) {
            return Err(AsitError::config("eval.probe_wd", "must be >= 0"));
        }
        if !(self.finetune_lr > 0.0) {
            return Err(AsitError::config("eval.finetune_lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(AsitError::config("eval.val_frac", "must lie in [0, 1)"));
        }
        if self.finetune_batch == 0 || self.feature_batch == 0 {
            return Err(AsitError::config("eval.finetune_batch", "batch sizes must be >= 1"));
        }
        Ok(())
    }
}

/// Result of one evaluation, written as `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    /// One entry per class; `NaN` where the class has no test example.
    pub per_class: Vec<f64>,
    pub num_examples: usize,
    pub fingerprint: String,
    pub notes: Vec<(String, String)>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let per: Vec<String> = self.per_class.iter().map(|v| format!("{v}")).collect();
        let mut out = format!(
            "metric = {}\nvalue = {}\nnum_examples = {}\nfingerprint = {}\nper_class = {}\n",
            self.metric,
            self.value,
            self.num_examples,
            self.fingerprint,
            per.join(", ")
        );
        for (k, v) in &self.notes {
            out.push_str(&format!("note.{k} = {v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = EvalReport {
            metric: String::new(),
            value: f64::NAN,
            per_class: Vec::new(),
            num_examples: 0,
            fingerprint: String::new(),
            notes: Vec::new(),
        };
        let bad = |line: &str| AsitError::Data(format!("malformed report line `{line}`"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| bad(line))?;
            match k {
                "metric" => r.metric = v.to_string(),
                "value" => r.value = v.parse().map_err(|_| bad(line))?,
                "num_examples" => r.num_examples = v.parse().map_err(|_| bad(line))?,
                "fingerprint" => r.fingerprint = v.to_string(),
                "per_class" if v.is_empty() => {}
                "per_class" => {
                    r.per_class = v
                        .split(", ")
                        .map(|x| x.parse::<f64>().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?
                }
                _ => match k.strip_prefix("note.") {
                    Some(n) => r.notes.push((n.to_string(), v.to_string())),
                    None => return Err(bad(line)),
                },
            }
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::vit::{Backbone, BackboneConfig, PatchGrid};
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn report_round_trips() {
        let r = EvalReport {
            metric: "accuracy".into(),
            value: 0.8125,
            per_class: vec![1.0, f64::NAN, 0.5],
            num_examples: 16,
            fingerprint: "abc".into(),
            notes: vec![("protocol".into(), "linear_probe".into())],
        };
        let back = EvalReport::from_text(&r.to_text()).unwrap();
        assert_eq!(back.to_text(), r.to_text());
    }

    fn tiny_backbone(seed: u64) -> (Backbone<f32>, PatchGrid) {
        let grid = PatchGrid::for_shape(16, 8, 4);
        (Backbone::init(&BackboneConfig::custom(1, 8, 2, 4), &grid, &mut seeded(seed)), grid)
    }

    fn clips(n: usize, seed: u64) -> Vec<LabeledClip> {
        let mut r = seeded(seed);
        (0..n)
            .map(|i| {
                let level = if i % 2 == 0 { 1.0 } else { -1.0 };
                let v = Array2::from_shape_simple_fn((16, 8), || level + r.gen_range(-0.3..0.3));
                LabeledClip {
                    spectrogram: LogMelSpectrogram::new(v, 10.0).unwrap(),
                    labels: vec![i % 2],
                }
            })
            .collect()
    }

    #[test]
    fn features_are_deterministic_and_sized() {
        let (bb, grid) = tiny_backbone(1);
        let c = clips(5, 2);
        let refs: Vec<&Array2<f64>> = c.iter().map(|c| &c.spectrogram.values).collect();
        let a = extract_features(&bb, &grid, &refs, Pooling::Cls, 2).unwrap();
        let b = extract_features(&bb, &grid, &refs, Pooling::Cls, 3).unwrap();
        assert_eq!(a.dim(), (5, 8));
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-6));
        let (other, _) = tiny_backbone(9);
        let o = extract_features(&other, &grid, &refs, Pooling::Cls, 2).unwrap();
        assert!((&a - &o).iter().any(|d| d.abs() > 1e-6));
        let m = extract_features(&bb, &grid, &refs, Pooling::Mean, 2).unwrap();
        assert_eq!(m.dim(), (5, 8));
    }

    #[test]
    fn finetune_zero_epochs_is_initial_head() {
        let (bb, grid) = tiny_backbone(3);
        let c = clips(8, 4);
        let cfg = EvalConfig {
            finetune_epochs: 0,
            ..Default::default()
        };
        let (r, m) = finetune(bb.clone(), &grid, &c, &c, &c, 2, &cfg).unwrap();
        let init = Classifier::new(bb, 2, &mut crate::rng::rng_for(cfg.seed, &[0xF1]));
        assert_eq!(m, init);
        let s = init.scores(&grid, &c, cfg.pooling, 4).unwrap();
        let labels: Vec<Vec<usize>> = c.iter().map(|c| c.labels.clone()).collect();
        assert_eq!(r.value, evaluate_scores(&s, &labels, false).unwrap().1);
    }

    #[test]
    fn finetune_learns_a_separable_toy_and_is_deterministic() {
        let (bb, grid) = tiny_backbone(5);
        let c = clips(16, 6);
        let cfg = EvalConfig {
            finetune_epochs: 8,
            finetune_lr: 3e-3,
            finetune_batch: 4,
            ..Default::default()
        };
        let (a, _) = finetune(bb.clone(), &grid, &c, &c, &c, 2, &cfg).unwrap();
        let (b, _) = finetune(bb, &grid, &c, &c, &c, 2, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.value, 1.0);
    }
}
