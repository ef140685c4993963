use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::loss::{
    center_then_sharpen, global_distill_loss, local_distill_loss, loss_weights, recon_loss, LossParts,
};
use super::optim::AdamW;
use super::state::{ema_update, update_center, TwinModelState};
use super::{DistillConfig, TrainConfig};
use crate::augment::{apply_corruption, AugmentConfig, CorruptionRecord, ViewPair};
use crate::dsp::LogMelSpectrogram;
use crate::error::{AsitError, Result};
use crate::vit::{patchify_batch, AsitModel, HeadGrads, HeadSelect, Parameters, PatchGrid};

/// Both clean views of one clip, their corrupted counterparts and the masks
/// the losses are evaluated on.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub clip_id: u64,
    pub clean: [Array2<f64>; 2],
    pub corrupted: [Array2<f64>; 2],
    pub pixel_mask: [Array2<bool>; 2],
    pub token_mask: [Vec<bool>; 2],
    pub records: [Option<CorruptionRecord>; 2],
}

/// Corrupts the views of `pair`. With corruption disabled the views pass
/// through unchanged and the masks cover everything; in single-view mode the
/// second view stays clean and contributes no masked entries.
pub fn prepare_sample<R: Rng + ?Sized>(
    pair: &ViewPair,
    aliens: [&LogMelSpectrogram; 2],
    aug: &AugmentConfig,
    patch: usize,
    rng: &mut R,
) -> Result<TrainSample> {
    let views = [&pair.view_a, &pair.view_b];
    let mut corrupted = Vec::with_capacity(2);
    let mut pixel = Vec::with_capacity(2);
    let mut tokens = Vec::with_capacity(2);
    let mut records = [None, None];
    for (i, v) in views.iter().enumerate() {
        let shape = v.shape();
        let n = shape.0.div_ceil(patch) * shape.1.div_ceil(patch);
        if !aug.corruption {
            corrupted.push(v.values.clone());
            pixel.push(Array2::from_elem(shape, true));
            tokens.push(vec![true; n]);
        } else if i == 1 && aug.single_view {
            corrupted.push(v.values.clone());
            pixel.push(Array2::from_elem(shape, false));
            tokens.push(vec![false; n]);
        } else {
            let (x, rec) = apply_corruption(v, aliens[i], aug, patch, rng)?;
            corrupted.push(x.values);
            pixel.push(rec.pixel_mask.clone());
            tokens.push(rec.token_mask.clone());
            records[i] = Some(rec);
        }
    }
    Ok(TrainSample {
        clip_id: pair.source_id,
        clean: [pair.view_a.values.clone(), pair.view_b.values.clone()],
        corrupted: two(corrupted),
        pixel_mask: two(pixel),
        token_mask: two(tokens),
        records,
    })
}

fn two<T: std::fmt::Debug>(v: Vec<T>) -> [T; 2] {
    v.try_into().expect("two views")
}

/// Pixel mask laid out like [`patchify_batch`] output.
pub fn patchify_mask(masks: &[&Array2<bool>], grid: &PatchGrid) -> Array2<bool> {
    let as_f: Vec<Array2<f64>> = masks.iter().map(|m| m.mapv(|b| if b { 1.0 } else { 0.0 })).collect();
    let refs: Vec<&Array2<f64>> = as_f.iter().collect();
    patchify_batch::<f64>(&refs, grid).mapv(|v| v > 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub wd: f64,
    pub lambda: f64,
    pub parts: LossParts,
    pub total: f64,
}

/// Student gradients for one batch along with the raw teacher logits used
/// for centering.
pub struct BatchGradients {
    pub grads: AsitModel<f32>,
    pub parts: LossParts,
    pub total: f64,
    pub teacher_local: Option<Array2<f32>>,
    pub teacher_global: Option<Array2<f32>>,
}

/// Owns the twin state and optimizer and advances them one batch at a time.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub state: TwinModelState<f32>,
    pub opt: AdamW<AsitModel<f32>>,
    pub grid: PatchGrid,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    /// Length of every schedule.
    pub total_steps: u64,
}

impl Pretrainer {
    pub fn new(
        student: AsitModel<f32>,
        grid: PatchGrid,
        distill: DistillConfig,
        train: TrainConfig,
        total_steps: u64,
    ) -> Result<Self> {
        distill.validate()?;
        train.validate()?;
        let opt = AdamW::new(&student, train.beta1, train.beta2, train.adam_eps);
        Ok(Pretrainer {
            state: TwinModelState::new(student),
            opt,
            grid,
            distill,
            train,
            total_steps,
        })
    }

    fn fault(&self, batch: &[TrainSample], parts: &LossParts, detail: &str) -> AsitError {
        let ids: Vec<u64> = batch.iter().map(|b| b.clip_id).collect();
        AsitError::NumericFault {
            site: format!("train step {}", self.state.step),
            detail: format!(
                "{detail}; loss_recons={} loss_lcl={} loss_gcl={}; clips {:?}",
                parts.recons, parts.lcl, parts.gcl, ids
            ),
        }
    }

    /// Forward passes, losses and student gradients; touches no state.
    pub fn compute_gradients(&self, batch: &[TrainSample]) -> Result<BatchGradients> {
        if batch.is_empty() {
            return Err(AsitError::Argument("empty batch".into()));
        }
        let b = batch.len();
        let toggles = self.train.toggles();
        let w = loss_weights(&toggles, self.distill.alpha())?;
        let views = |f: &dyn Fn(&TrainSample, usize) -> &Array2<f64>| -> Vec<&Array2<f64>> {
            (0..2).flat_map(|v| batch.iter().map(move |s| (s, v))).map(|(s, v)| f(s, v)).collect()
        };
        let clean = patchify_batch::<f32>(&views(&|s, v| &s.clean[v]), &self.grid);
        let corrupted = patchify_batch::<f32>(&views(&|s, v| &s.corrupted[v]), &self.grid);

        let (teacher_local, teacher_global) = if toggles.lcl || toggles.gcl {
            let sel = HeadSelect {
                recon: false,
                local: toggles.lcl,
                global: toggles.gcl,
            };
            let out = self.state.teacher.forward(&clean, 2 * b, sel)?;
            (out.local, out.global)
        } else {
            (None, None)
        };
        let sel = HeadSelect {
            recon: toggles.recon,
            local: toggles.lcl,
            global: toggles.gcl,
        };
        let fwd = self.state.student.forward(&corrupted, 2 * b, sel)?;
        let mut parts = LossParts::default();
        let mut heads = HeadGrads::default();
        let reduction = self.distill.reduction;

        if let Some(pred) = &fwd.recon {
            let masks: Vec<&Array2<bool>> = (0..2).flat_map(|v| batch.iter().map(move |s| &s.pixel_mask[v])).collect();
            let mask = patchify_mask(&masks, &self.grid);
            let l = recon_loss(pred, &clean, &mask, reduction)?;
            parts.recons = l.value;
            heads.recon = Some(l.grad * w[0] as f32);
        }
        if let (Some(student), Some(teacher)) = (&fwd.local, &teacher_local) {
            let center = if self.distill.center_local {
                self.state.local_center.clone()
            } else {
                Array1::zeros(teacher.ncols())
            };
            let probs = center_then_sharpen(teacher, &center, self.distill.tau_t);
            let tokens: Vec<bool> = (0..2)
                .flat_map(|v| batch.iter().flat_map(move |s| s.token_mask[v].iter().copied()))
                .collect();
            let l = local_distill_loss(student, &probs, &tokens, self.distill.tau_s, reduction)?;
            parts.lcl = l.value;
            heads.local = Some(l.grad * w[1] as f32);
        }
        if let (Some(student), Some(teacher)) = (&fwd.global, &teacher_global) {
            let probs = center_then_sharpen(teacher, &self.state.global_center, self.distill.tau_t);
            let (sa, sb) = (student.slice(s![..b, ..]).to_owned(), student.slice(s![b.., ..]).to_owned());
            let (ta, tb) = (probs.slice(s![..b, ..]).to_owned(), probs.slice(s![b.., ..]).to_owned());
            let l = global_distill_loss(&sa, &sb, &ta, &tb, self.distill.tau_s)?;
            parts.gcl = l.value;
            let mut g = Array2::zeros(student.dim());
            g.slice_mut(s![..b, ..]).assign(&l.grad_a);
            g.slice_mut(s![b.., ..]).assign(&l.grad_b);
            heads.global = Some(g * w[2] as f32);
        }
        let total: f64 = parts.as_array().iter().zip(w).map(|(p, w)| p * w).sum();
        if !total.is_finite() {
            return Err(self.fault(batch, &parts, "non-finite loss"));
        }
        let mut grads = self.state.student.zeros_like();
        self.state.student.backward(&fwd, &heads, None, None, &mut grads);
        if !grads.all_finite() {
            return Err(self.fault(batch, &parts, "non-finite gradient"));
        }
        Ok(BatchGradients {
            grads,
            parts,
            total,
            teacher_local,
            teacher_global,
        })
    }

    /// One optimization step: student update, then the teacher EMA, then the
    /// centers.
    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<StepReport> {
        let step = self.state.step;
        let total = self.total_steps;
        let lr = self.train.lr_at(step, total);
        let wd = self.train.wd_at(step, total);
        let lambda = self.distill.lambda_at(step, total);
        let g = self.compute_gradients(batch)?;
        self.opt.step(&mut self.state.student, &g.grads, lr, wd)?;
        ema_update(&mut self.state.teacher, &self.state.student, lambda)?;
        let m = self.distill.center_momentum;
        if let Some(t) = &g.teacher_global {
            update_center(&mut self.state.global_center, t, m);
        }
        if let (Some(t), true) = (&g.teacher_local, self.distill.center_local) {
            update_center(&mut self.state.local_center, t, m);
        }
        self.state.step += 1;
        Ok(StepReport {
            step,
            lr,
            wd,
            lambda,
            parts: g.parts,
            total: g.total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::make_views;
    use crate::rng::seeded;
    use crate::vit::{BackboneConfig, HeadConfig};

    fn clip(seed: u64) -> LogMelSpectrogram {
        let mut r = seeded(seed);
        LogMelSpectrogram::new(Array2::from_shape_simple_fn((40, 16), || r.gen_range(-1.0..1.0)), 10.0).unwrap()
    }

    fn batch(seed: u64, aug: &AugmentConfig) -> Vec<TrainSample> {
        let mut r = seeded(seed);
        let clips: Vec<_> = (0..3).map(|i| clip(seed + i)).collect();
        (0..3)
            .map(|i| {
                let pair = make_views(&clips[i], aug, 32, i as u64, &mut r).unwrap();
                let alien = &clips[(i + 1) % 3];
                let alien = crate::augment::crop_and_resize(alien, 0, 40, 32).unwrap();
                prepare_sample(&pair, [&alien, &alien], aug, 8, &mut r).unwrap()
            })
            .collect()
    }

    fn trainer(train: TrainConfig, total: u64) -> Pretrainer {
        let grid = PatchGrid::for_shape(32, 16, 8);
        let bb = BackboneConfig::custom(1, 16, 2, 8);
        let hc = HeadConfig {
            hidden: 16,
            bottleneck: 8,
            local_classes: 6,
            global_classes: 10,
        };
        let model = AsitModel::init(&bb, &hc, &grid, &mut seeded(1));
        Pretrainer::new(model, grid, DistillConfig::default(), train, total).unwrap()
    }

    fn aug() -> AugmentConfig {
        AugmentConfig {
            mask_block_min: 2,
            mask_block_max: 6,
            coverage_tolerance: 0.05,
            ..Default::default()
        }
    }

    #[test]
    fn recon_only_step_moves_teacher_by_one_ema() {
        let train = TrainConfig {
            lcl: false,
            gcl: false,
            ..Default::default()
        };
        let mut t = trainer(train, 10);
        let before = t.state.teacher.clone();
        let report = t.train_step(&batch(5, &aug())).unwrap();
        assert!(report.total.is_finite() && report.total > 0.0);
        assert_eq!(report.parts.lcl, 0.0);
        let mut expect = before;
        ema_update(&mut expect, &t.state.student, report.lambda).unwrap();
        assert_eq!(t.state.teacher, expect);
        assert_eq!(t.state.global_center.sum(), 0.0);
    }

    #[test]
    fn gradients_leave_teacher_and_centers_untouched() {
        let mut t = trainer(TrainConfig::default(), 10);
        t.state.global_center.fill(0.25);
        let b = batch(6, &aug());
        let teacher = t.state.teacher.clone();
        let centers = (t.state.global_center.clone(), t.state.local_center.clone());
        let g = t.compute_gradients(&b).unwrap();
        assert!(g.parts.recons > 0.0 && g.parts.lcl > 0.0 && g.parts.gcl > 0.0);
        assert_eq!(t.state.teacher, teacher);
        assert_eq!((t.state.global_center.clone(), t.state.local_center.clone()), centers);
    }

    #[test]
    fn teacher_is_frozen_once_lambda_reaches_one() {
        let mut t = trainer(TrainConfig::default(), 1);
        let b = batch(7, &aug());
        t.train_step(&b).unwrap();
        let frozen = t.state.teacher.clone();
        let r = t.train_step(&b).unwrap();
        assert_eq!(r.lambda, 1.0);
        assert_eq!(t.state.teacher, frozen);
        assert_ne!(t.state.student, frozen);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut t = trainer(TrainConfig::default(), 4);
            (0..3).map(|i| t.train_step(&batch(i, &aug())).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn disabled_corruption_masks_everything() {
        let a = AugmentConfig {
            corruption: false,
            ..aug()
        };
        let b = batch(3, &a);
        assert_eq!(b[0].corrupted, b[0].clean);
        assert!(b[0].pixel_mask[1].iter().all(|&m| m));
        let single = AugmentConfig {
            single_view: true,
            ..aug()
        };
        let b = batch(3, &single);
        assert_eq!(b[0].corrupted[1], b[0].clean[1]);
        assert!(b[0].token_mask[1].iter().all(|&m| !m));
        assert!(b[0].records[0].is_some());
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let mut t = trainer(TrainConfig::default(), 4);
        t.state.global_center[0] = f32::NAN;
        match t.train_step(&batch(1, &aug())) {
            Err(AsitError::NumericFault { site, detail }) => {
                assert_eq!(site, "train step 0");
                assert!(detail.contains("clips [0, 1, 2]"), "{detail}");
            }
            other => panic!("expected numeric fault, got {:?}", other.map(|_| ())),
        }
    }
}
