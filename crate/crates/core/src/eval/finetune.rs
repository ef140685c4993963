use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use super::features::{fit_to_grid, pool};
use super::probe::{check_labels, evaluate_scores, link, targets};
use super::{EvalConfig, EvalReport, LabeledClip};
use crate::distill::AdamW;
use crate::error::{AsitError, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::vit::params::impl_parameters;
use crate::vit::{merge_tokens, patchify_batch, split_tokens, Backbone, Linear, Parameters, PatchGrid};

use super::features::Pooling;

/// Pretrained backbone with a fresh linear classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<S> {
    pub backbone: Backbone<S>,
    pub head: Linear<S>,
}

impl_parameters!(Classifier { backbone, head });

impl<S: Scalar> Classifier<S> {
    pub fn new<R: Rng + ?Sized>(backbone: Backbone<S>, classes: usize, rng: &mut R) -> Self {
        let head = Linear::init(backbone.embed_dim(), classes, rng);
        Classifier { backbone, head }
    }

    fn patches(&self, grid: &PatchGrid, clips: &[&LabeledClip]) -> Result<Array2<S>> {
        let fitted = clips
            .iter()
            .map(|c| fit_to_grid(&c.spectrogram.values, grid))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Array2<f64>> = fitted.iter().collect();
        Ok(patchify_batch::<S>(&refs, grid))
    }

    pub fn scores(&self, grid: &PatchGrid, clips: &[LabeledClip], pooling: Pooling, chunk: usize) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(clips.len());
        for part in clips.chunks(chunk.max(1)) {
            let refs: Vec<&LabeledClip> = part.iter().collect();
            let x = self.patches(grid, &refs)?;
            let (tokens, _) = self.backbone.forward(&x, part.len())?;
            let logits = self.head.forward(&pool(&tokens, part.len(), pooling));
            rows.push(logits.mapv(|v| v.to_f64_lossy()));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.head.d_out())));
        }
        Ok(ndarray::concatenate(Axis(0), &views).expect("same width"))
    }

    fn loss_and_grad(
        &self,
        grid: &PatchGrid,
        batch: &[&LabeledClip],
        pooling: Pooling,
        multilabel: bool,
    ) -> Result<(f64, Classifier<S>)> {
        let b = batch.len();
        let x = self.patches(grid, batch)?;
        let (tokens, cache) = self.backbone.forward(&x, b)?;
        let pooled = pool(&tokens, b, pooling);
        let logits = self.head.forward(&pooled).mapv(|v| v.to_f64_lossy());
        let labels: Vec<Vec<usize>> = batch.iter().map(|c| c.labels.clone()).collect();
        let y = targets(&labels, self.head.d_out());
        let mut p = logits.clone();
        link(&mut p, multilabel);
        let loss = if multilabel {
            -(&y * &p.mapv(|v| v.max(1e-12).ln()) + (1.0 - &y) * &p.mapv(|v| (1.0 - v).max(1e-12).ln())).sum()
                / b as f64
        } else {
            -(&y * &p.mapv(|v| v.max(1e-12).ln())).sum() / b as f64
        };
        if !loss.is_finite() {
            return Err(AsitError::NumericFault {
                site: "finetune".into(),
                detail: "non-finite loss".into(),
            });
        }
        let g = ((p - &y) / b as f64).mapv(S::lit);
        let mut grads = self.zeros_like();
        let dpooled = self.head.backward(&pooled, &g, &mut grads.head);
        let (cls, data) = split_tokens(&tokens, b);
        let (dcls, ddata) = match pooling {
            Pooling::Cls => (dpooled, Array2::zeros(data.raw_dim())),
            Pooling::Mean => {
                let n = data.nrows() / b;
                let mut dd = Array2::zeros(data.raw_dim());
                for i in 0..b {
                    let row = &dpooled.row(i) / S::from_usize(n).expect("token count");
                    for mut r in dd.slice_mut(ndarray::s![i * n..(i + 1) * n, ..]).rows_mut() {
                        r.assign(&row);
                    }
                }
                (Array2::zeros(cls.raw_dim()), dd)
            }
        };
        let dtokens = merge_tokens(&dcls, &ddata, b);
        self.backbone.backward(&cache, &dtokens, &mut grads.backbone);
        Ok((loss, grads))
    }
}

/// Trains backbone and a new head on `train`, keeps the parameters with the
/// best validation metric (the untrained model counts as epoch 0) and reports
/// that model on `test`.
pub fn finetune(
    backbone: Backbone<f32>,
    grid: &PatchGrid,
    train: &[LabeledClip],
    val: &[LabeledClip],
    test: &[LabeledClip],
    classes: usize,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Classifier<f32>)> {
    for (name, split) in [("train", train), ("val", val), ("test", test)] {
        if split.is_empty() {
            return Err(AsitError::DegenerateSplit(format!("{name} split is empty")));
        }
        let labels: Vec<Vec<usize>> = split.iter().map(|c| c.labels.clone()).collect();
        check_labels(&labels, classes, cfg.multilabel)?;
    }
    let mut model = Classifier::new(backbone, classes, &mut rng_for(cfg.seed, &[0xF1]));
    let mut opt = AdamW::new(&model, 0.9, 0.999, 1e-8);
    let val_labels: Vec<Vec<usize>> = val.iter().map(|c| c.labels.clone()).collect();
    let evaluate = |m: &Classifier<f32>| -> Result<f64> {
        let s = m.scores(grid, val, cfg.pooling, cfg.feature_batch)?;
        Ok(evaluate_scores(&s, &val_labels, cfg.multilabel)?.1)
    };
    let mut best = (evaluate(&model)?, 0usize, model.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.finetune_epochs {
        order.shuffle(&mut rng_for(cfg.seed, &[0xF2, epoch as u64]));
        for chunk in order.chunks(cfg.finetune_batch.max(1)) {
            let batch: Vec<&LabeledClip> = chunk.iter().map(|&i| &train[i]).collect();
            let (_, grads) = model.loss_and_grad(grid, &batch, cfg.pooling, cfg.multilabel)?;
            opt.step(&mut model, &grads, cfg.finetune_lr, cfg.finetune_wd)?;
        }
        let v = evaluate(&model)?;
        log::info!("finetune epoch {epoch}: validation {v:.4}");
        if v > best.0 {
            best = (v, epoch, model.clone());
        }
    }
    let (val_metric, best_epoch, chosen) = best;
    let test_labels: Vec<Vec<usize>> = test.iter().map(|c| c.labels.clone()).collect();
    let s = chosen.scores(grid, test, cfg.pooling, cfg.feature_batch)?;
    let (metric, value, per_class) = evaluate_scores(&s, &test_labels, cfg.multilabel)?;
    let report = EvalReport {
        metric,
        value,
        per_class,
        num_examples: test.len(),
        fingerprint: String::new(),
        notes: vec![
            ("protocol".into(), "finetune".into()),
            ("best_epoch".into(), best_epoch.to_string()),
            ("val_metric".into(), format!("{val_metric}")),
        ],
    };
    Ok((report, chosen))
}
