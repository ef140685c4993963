use ndarray::{s, Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AugmentConfig;
use crate::dsp::LogMelSpectrogram;
use crate::error::{AsitError, Result};

/// Axis-aligned block: rows `[top, top + height)` (time) by columns
/// `[left, left + width)` (frequency).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn is_aligned(&self, p: usize) -> bool {
        self.top % p == 0 && self.left % p == 0 && self.height % p == 0 && self.width % p == 0
    }
}

/// A pixel mask together with the blocks whose union produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub mask: Array2<bool>,
    pub rects: Vec<Rect>,
}

impl BlockMask {
    pub fn empty(shape: (usize, usize)) -> Self {
        BlockMask {
            mask: Array2::from_elem(shape, false),
            rects: Vec::new(),
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn coverage(&self) -> f64 {
        self.masked_count() as f64 / self.mask.len().max(1) as f64
    }

    /// Paints the union of `rects`; equals `mask` for every sampled mask.
    pub fn union_of_rects(&self) -> Array2<bool> {
        let mut out = Array2::from_elem(self.mask.dim(), false);
        for r in &self.rects {
            out.slice_mut(s![r.top..r.bottom(), r.left..r.right()]).fill(true);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptionMode {
    Zero,
    Alien,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub pixel_mask: Array2<bool>,
    pub token_mask: Vec<bool>,
    pub rects: Vec<Rect>,
    pub mode: CorruptionMode,
    pub requested_ratio: f64,
    pub realized_ratio: f64,
}

impl CorruptionRecord {
    pub fn masked_tokens(&self) -> usize {
        self.token_mask.iter().filter(|&&m| m).count()
    }

    /// One-line text form for batch debugging dumps.
    pub fn summary(&self) -> String {
        format!(
            "mode={:?} requested={:.4} realized={:.4} blocks={} masked_tokens={}/{}",
            self.mode,
            self.requested_ratio,
            self.realized_ratio,
            self.rects.len(),
            self.masked_tokens(),
            self.token_mask.len()
        )
    }
}

fn paint(mask: &mut Array2<bool>, r: &Rect) -> usize {
    let mut added = 0;
    for v in mask.slice_mut(s![r.top..r.bottom(), r.left..r.right()]).iter_mut() {
        if !*v {
            *v = true;
            added += 1;
        }
    }
    added
}

fn count_new(mask: &Array2<bool>, r: &Rect) -> usize {
    mask.slice(s![r.top..r.bottom(), r.left..r.right()])
        .iter()
        .filter(|&&v| !v)
        .count()
}

/// Random block mask with union coverage within `tolerance` of `ratio`.
///
/// Blocks have sides drawn uniformly from `[block_min, block_max]` pixels,
/// uniform positions, and are clipped at the borders. With `align_to = Some(p)`
/// every corner snaps to the `p` grid. Time and frequency are treated alike.
pub fn sample_block_mask<R: Rng + ?Sized>(
    shape: (usize, usize),
    ratio: f64,
    cfg: &AugmentConfig,
    align_to: Option<usize>,
    rng: &mut R,
) -> Result<BlockMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(AsitError::Argument(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let (t, f) = shape;
    if t == 0 || f == 0 {
        return Err(AsitError::Argument("empty mask shape".into()));
    }
    let unit = align_to.unwrap_or(1).max(1);
    let total = (t * f) as f64;
    let tol = cfg.coverage_tolerance;
    let mut out = BlockMask::empty(shape);
    let mut covered = 0usize;
    let (mut lo, mut hi) = (cfg.mask_block_min, cfg.mask_block_max);
    let mut rejections = 0usize;

    for _ in 0..200_000 {
        let cov = covered as f64 / total;
        if cov >= ratio && cov <= ratio + tol {
            break;
        }
        let (h, w) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let rect = if unit > 1 {
            let (rows, cols) = (t.div_ceil(unit), f.div_ceil(unit));
            let (top, left) = (rng.gen_range(0..rows) * unit, rng.gen_range(0..cols) * unit);
            let (h, w) = (h.div_ceil(unit) * unit, w.div_ceil(unit) * unit);
            Rect {
                top,
                left,
                height: h.min(t - top),
                width: w.min(f - left),
            }
        } else {
            let (top, left) = (rng.gen_range(0..t), rng.gen_range(0..f));
            Rect {
                top,
                left,
                height: h.min(t - top),
                width: w.min(f - left),
            }
        };
        let added = count_new(&out.mask, &rect);
        if added == 0 {
            continue;
        }
        let next = (covered + added) as f64 / total;
        if next > ratio + tol {
            rejections += 1;
            if rejections >= 16 {
                // Blocks are too coarse for the remaining budget; shrink them.
                rejections = 0;
                hi = (hi / 2).max(1);
                lo = lo.min(hi);
                if unit > 1 {
                    lo = lo.min(unit);
                }
            }
            continue;
        }
        if cov >= ratio - tol && !out.rects.is_empty() && (next - ratio).abs() >= (cov - ratio).abs() {
            break;
        }
        covered += paint(&mut out.mask, &rect);
        out.rects.push(rect);
    }
    Ok(out)
}

/// Flags token `i` (row-major over the `p x p` tile grid) iff any pixel in
/// its tile is masked. Edge tiles of non-divisible shapes cover the remainder.
pub fn derive_token_mask(pixel_mask: &Array2<bool>, p: usize) -> Vec<bool> {
    let (t, f) = pixel_mask.dim();
    let (gt, gf) = (t.div_ceil(p), f.div_ceil(p));
    let mut out = vec![false; gt * gf];
    for ((i, j), &m) in pixel_mask.indexed_iter() {
        if m {
            out[(i / p) * gf + j / p] = true;
        }
    }
    out
}

/// Corrupts `x` in the given mode at the given coverage.
pub fn corrupt_with_mode<R: Rng + ?Sized>(
    x: &LogMelSpectrogram,
    alien: &LogMelSpectrogram,
    mode: CorruptionMode,
    ratio: f64,
    cfg: &AugmentConfig,
    patch: usize,
    rng: &mut R,
) -> Result<(LogMelSpectrogram, CorruptionRecord)> {
    if x.shape() != alien.shape() {
        return Err(AsitError::Argument(format!(
            "alien spectrogram shape {:?} differs from input {:?}",
            alien.shape(),
            x.shape()
        )));
    }
    let block = if ratio > 0.0 {
        let align = cfg.align_masks.then_some(patch);
        sample_block_mask(x.shape(), ratio, cfg, align, rng)?
    } else {
        BlockMask::empty(x.shape())
    };
    let mut values = x.values.clone();
    match mode {
        CorruptionMode::Zero => Zip::from(&mut values).and(&block.mask).for_each(|v, &m| {
            if m {
                *v = 0.0;
            }
        }),
        CorruptionMode::Alien => Zip::from(&mut values)
            .and(&block.mask)
            .and(&alien.values)
            .for_each(|v, &m, &a| {
                if m {
                    *v = a;
                }
            }),
    }
    let token_mask = derive_token_mask(&block.mask, patch);
    let realized_ratio = block.coverage();
    let corrupted = LogMelSpectrogram {
        values,
        frame_hop_ms: x.frame_hop_ms,
    };
    Ok((
        corrupted,
        CorruptionRecord {
            pixel_mask: block.mask,
            token_mask,
            rects: block.rects,
            mode,
            requested_ratio: ratio,
            realized_ratio,
        },
    ))
}

/// Draws zero-fill or alien mode, then corrupts at that mode's coverage.
pub fn apply_corruption<R: Rng + ?Sized>(
    x: &LogMelSpectrogram,
    alien: &LogMelSpectrogram,
    cfg: &AugmentConfig,
    patch: usize,
    rng: &mut R,
) -> Result<(LogMelSpectrogram, CorruptionRecord)> {
    let mode = if rng.gen_bool(cfg.alien_prob) {
        CorruptionMode::Alien
    } else {
        CorruptionMode::Zero
    };
    let ratio = match mode {
        CorruptionMode::Zero => cfg.corruption_ratio,
        CorruptionMode::Alien => cfg.alien_ratio,
    };
    corrupt_with_mode(x, alien, mode, ratio, cfg, patch, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn spec(t: usize, f: usize, seed: u64) -> LogMelSpectrogram {
        let mut r = seeded(seed);
        LogMelSpectrogram::new(Array2::from_shape_fn((t, f), |_| r.gen_range(-2.0..2.0)), 10.0).unwrap()
    }

    fn scan_oracle(mask: &Array2<bool>, p: usize) -> Vec<bool> {
        let (t, f) = mask.dim();
        let (gt, gf) = (t.div_ceil(p), f.div_ceil(p));
        let mut out = Vec::new();
        for ti in 0..gt {
            for fi in 0..gf {
                let mut any = false;
                for i in ti * p..((ti + 1) * p).min(t) {
                    for j in fi * p..((fi + 1) * p).min(f) {
                        any |= mask[[i, j]];
                    }
                }
                out.push(any);
            }
        }
        out
    }

    #[test]
    fn tiny_ratio_places_single_minimal_block() {
        let cfg = AugmentConfig {
            mask_block_min: 8,
            mask_block_max: 8,
            ..AugmentConfig::default()
        };
        for seed in 0..20 {
            let m = sample_block_mask((50, 50), 0.02, &cfg, None, &mut seeded(seed)).unwrap();
            assert!((m.coverage() - 0.02).abs() <= 0.02);
            let first = m.rects[0];
            if first.height == 8 && first.width == 8 {
                assert_eq!(m.rects.len(), 1, "seed {seed}");
            }
        }
    }

    #[test]
    fn coverage_mean_at_full_shape() {
        let cfg = AugmentConfig::default();
        let mut rng = seeded(11);
        let n = 1000;
        let mean: f64 = (0..n)
            .map(|_| sample_block_mask((592, 128), 0.7, &cfg, None, &mut rng).unwrap().coverage())
            .sum::<f64>()
            / n as f64;
        assert!((0.68..=0.72).contains(&mean), "mean coverage {mean}");
    }

    #[test]
    fn aligned_blocks_snap_to_grid() {
        let cfg = AugmentConfig::default();
        let mut rng = seeded(5);
        for _ in 0..50 {
            let m = sample_block_mask((592, 128), 0.5, &cfg, Some(16), &mut rng).unwrap();
            assert!(m.rects.iter().all(|r| r.is_aligned(16)), "{:?}", m.rects);
            assert_eq!(m.union_of_rects(), m.mask);
            assert!((m.coverage() - 0.5).abs() <= 0.02);
        }
    }

    #[test]
    fn ratio_out_of_range_rejected() {
        let cfg = AugmentConfig::default();
        for r in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(
                sample_block_mask((32, 32), r, &cfg, None, &mut seeded(0)),
                Err(AsitError::Argument(_))
            ));
        }
    }

    #[test]
    fn token_mask_examples() {
        let empty = Array2::from_elem((32, 32), false);
        assert!(derive_token_mask(&empty, 16).iter().all(|&t| !t));

        let mut one = empty.clone();
        one[[0, 0]] = true;
        assert_eq!(derive_token_mask(&one, 16), vec![true, false, false, false]);

        let mut block = Array2::from_elem((48, 48), false);
        block.slice_mut(s![10..30, 10..30]).fill(true);
        let tm = derive_token_mask(&block, 16);
        assert_eq!(tm, scan_oracle(&block, 16));
        // tiles (0,0), (0,1), (1,0), (1,1) of a 3x3 grid
        let flagged: Vec<usize> = tm.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        assert_eq!(flagged, vec![0, 1, 3, 4]);
    }

    #[test]
    fn zero_ratio_is_identity() {
        let x = spec(32, 32, 1);
        let a = spec(32, 32, 2);
        for mode in [CorruptionMode::Zero, CorruptionMode::Alien] {
            let (xh, rec) =
                corrupt_with_mode(&x, &a, mode, 0.0, &AugmentConfig::default(), 16, &mut seeded(3)).unwrap();
            assert_eq!(xh, x);
            assert!(rec.token_mask.iter().all(|&t| !t));
        }
    }

    #[test]
    fn zero_mode_zeroes_masked_pixels_only() {
        let x = spec(64, 32, 1);
        let a = spec(64, 32, 2);
        let (xh, rec) =
            corrupt_with_mode(&x, &a, CorruptionMode::Zero, 0.5, &AugmentConfig::default(), 16, &mut seeded(9))
                .unwrap();
        for ((idx, &m), &v) in rec.pixel_mask.indexed_iter().zip(xh.values.iter()) {
            if m {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v.to_bits(), x.values[idx].to_bits());
            }
        }
    }

    #[test]
    fn alien_self_replacement_is_identity() {
        let x = spec(64, 32, 4);
        let (xh, rec) =
            corrupt_with_mode(&x, &x, CorruptionMode::Alien, 0.3, &AugmentConfig::default(), 16, &mut seeded(1))
                .unwrap();
        assert_eq!(xh, x);
        assert!(rec.pixel_mask.iter().any(|&m| m));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = spec(32, 32, 1);
        let a = spec(16, 32, 2);
        assert!(apply_corruption(&x, &a, &AugmentConfig::default(), 16, &mut seeded(0)).is_err());
    }

    #[test]
    fn apply_corruption_deterministic_and_mode_ratio() {
        let x = spec(592, 128, 1);
        let a = spec(592, 128, 2);
        let cfg = AugmentConfig::default();
        let r1 = apply_corruption(&x, &a, &cfg, 16, &mut seeded(77)).unwrap();
        let r2 = apply_corruption(&x, &a, &cfg, 16, &mut seeded(77)).unwrap();
        assert_eq!(r1, r2);
        let mut modes = [0usize; 2];
        let mut rng = seeded(8);
        for _ in 0..40 {
            let (_, rec) = apply_corruption(&x, &a, &cfg, 16, &mut rng).unwrap();
            let target = match rec.mode {
                CorruptionMode::Zero => {
                    modes[0] += 1;
                    0.7
                }
                CorruptionMode::Alien => {
                    modes[1] += 1;
                    0.3
                }
            };
            assert!((rec.realized_ratio - target).abs() <= 0.02);
        }
        assert!(modes[0] > 0 && modes[1] > 0);
    }

    proptest! {
        #[test]
        fn token_mask_matches_exhaustive_scan(
            t in 1usize..70, f in 1usize..40, p in 1usize..17, seed in any::<u64>(), density in 0.0f64..0.3
        ) {
            let mut r = seeded(seed);
            let mask = Array2::from_shape_fn((t, f), |_| r.gen_bool(density));
            prop_assert_eq!(derive_token_mask(&mask, p), scan_oracle(&mask, p));
        }

        #[test]
        fn corruption_preserves_complement(seed in any::<u64>(), alien in any::<bool>()) {
            let x = spec(64, 48, seed);
            let a = spec(64, 48, seed.wrapping_add(1));
            let mode = if alien { CorruptionMode::Alien } else { CorruptionMode::Zero };
            let (xh, rec) = corrupt_with_mode(&x, &a, mode, 0.4, &AugmentConfig::default(), 16, &mut seeded(seed)).unwrap();
            for (idx, &m) in rec.pixel_mask.indexed_iter() {
                if !m {
                    prop_assert_eq!(xh.values[idx].to_bits(), x.values[idx].to_bits());
                }
            }
            prop_assert_eq!(BlockMask { mask: rec.pixel_mask.clone(), rects: rec.rects.clone() }.union_of_rects(), rec.pixel_mask);
        }
    }
}
