use ndarray::Array2;

use crate::error::{AsitError, Result};

/// Example indices ordered by descending score; equal scores keep index order.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Mean of precision@k over the ranks `k` of the positives. `None` when there
/// are no positives.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in rank_descending(scores).iter().enumerate() {
        if targets[i] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub map: f64,
    /// AP per class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Unweighted mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(scores: &Array2<f64>, targets: &Array2<bool>) -> Result<MapResult> {
    if scores.dim() != targets.dim() {
        return Err(AsitError::Argument(format!(
            "scores {:?} and targets {:?} differ in shape",
            scores.dim(),
            targets.dim()
        )));
    }
    let per_class: Vec<Option<f64>> = (0..scores.ncols())
        .map(|c| {
            let s: Vec<f64> = scores.column(c).to_vec();
            let t: Vec<bool> = targets.column(c).to_vec();
            average_precision(&s, &t)
        })
        .collect();
    let excluded: Vec<usize> = per_class
        .iter()
        .enumerate()
        .filter(|(_, ap)| ap.is_none())
        .map(|(c, _)| c)
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(AsitError::DegenerateSplit("no class has a positive example".into()));
    }
    if !excluded.is_empty() {
        log::warn!("classes without positives excluded from mAP: {excluded:?}");
    }
    Ok(MapResult {
        map: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
        excluded,
    })
}

/// Fraction of examples whose arg-max class (first on ties) equals the label,
/// plus per-class recall (`NaN` for classes absent from `labels`).
pub fn accuracy(scores: &Array2<f64>, labels: &[usize]) -> (f64, Vec<f64>) {
    let classes = scores.ncols();
    let mut correct = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (row, &y) in scores.rows().into_iter().zip(labels) {
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        seen[y] += 1;
        if pred == y {
            correct[y] += 1;
        }
    }
    let total: usize = seen.iter().sum();
    let acc = correct.iter().sum::<usize>() as f64 / total.max(1) as f64;
    let per = correct
        .iter()
        .zip(&seen)
        .map(|(&c, &n)| if n == 0 { f64::NAN } else { c as f64 / n as f64 })
        .collect();
    (acc, per)
}
