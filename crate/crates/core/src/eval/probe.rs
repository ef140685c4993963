use ndarray::{Array1, Array2, Axis};

use super::metrics::{accuracy, mean_average_precision};
use super::{EvalConfig, EvalReport};
use crate::error::{AsitError, Result};

/// Features standardized with training statistics, then one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub multilabel: bool,
}

impl LinearClassifier {
    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }

    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = self.standardize(x).dot(&self.weight);
        z += &self.bias;
        z
    }
}

pub(crate) fn check_labels(labels: &[Vec<usize>], classes: usize, multilabel: bool) -> Result<()> {
    for (i, l) in labels.iter().enumerate() {
        if !multilabel && l.len() != 1 {
            return Err(AsitError::Data(format!("example {i} needs exactly one label, has {}", l.len())));
        }
        if let Some(&bad) = l.iter().find(|&&c| c >= classes) {
            return Err(AsitError::Data(format!("example {i} has label {bad} >= {classes} classes")));
        }
    }
    Ok(())
}

pub(crate) fn targets(labels: &[Vec<usize>], classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, l) in labels.iter().enumerate() {
        for &c in l {
            y[[i, c]] = 1.0;
        }
    }
    y
}

/// Per-row softmax (single-label) or elementwise sigmoid (multilabel).
pub(crate) fn link(z: &mut Array2<f64>, multilabel: bool) {
    if multilabel {
        z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
    } else {
        for mut row in z.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
    }
}

/// Largest eigenvalue of `[x 1]^T [x 1] / n` by power iteration.
fn gram_spectral_norm(x: &Array2<f64>) -> f64 {
    let n = x.nrows() as f64;
    let mut v = Array1::<f64>::from_elem(x.ncols() + 1, 1.0);
    let mut lambda = 0.0;
    for _ in 0..100 {
        v /= v.dot(&v).sqrt();
        let xv = x.dot(&v.slice(ndarray::s![..x.ncols()])) + v[x.ncols()];
        let mut w = Array1::zeros(v.len());
        w.slice_mut(ndarray::s![..x.ncols()]).assign(&(x.t().dot(&xv) / n));
        w[x.ncols()] = xv.sum() / n;
        let next = w.dot(&v);
        v = w;
        if (next - lambda).abs() <= 1e-9 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Full-batch gradient descent on the mean logistic loss plus
/// `wd/2 * |W|^2`. The step is `lr / L` with `L` the smoothness constant of
/// the objective, so any `lr` in (0, 2) converges.
pub fn fit_linear(
    x: &Array2<f64>,
    labels: &[Vec<usize>],
    classes: usize,
    multilabel: bool,
    lr: f64,
    epochs: usize,
    wd: f64,
) -> Result<LinearClassifier> {
    if x.nrows() != labels.len() || x.nrows() == 0 {
        return Err(AsitError::Argument(format!(
            "{} feature rows for {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    check_labels(labels, classes, multilabel)?;
    let y = targets(labels, classes);
    let missing: Vec<usize> = (0..classes).filter(|&c| y.column(c).sum() == 0.0).collect();
    if !missing.is_empty() {
        return Err(AsitError::DegenerateSplit(format!(
            "classes {missing:?} have no training example"
        )));
    }
    let mean = x.mean_axis(Axis(0)).expect("rows > 0");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let mut model = LinearClassifier {
        mean,
        std,
        weight: Array2::zeros((x.ncols(), classes)),
        bias: Array1::zeros(classes),
        multilabel,
    };
    let xs = model.standardize(x);
    let n = x.nrows() as f64;
    // Softmax cross-entropy has logit Hessian norm <= 1/2, sigmoid <= 1/4.
    let curvature = if multilabel { 0.25 } else { 0.5 };
    let step = lr / (curvature * gram_spectral_norm(&xs) + wd);
    for _ in 0..epochs {
        let mut p = xs.dot(&model.weight);
        p += &model.bias;
        link(&mut p, multilabel);
        let g = (p - &y) / n;
        let mut gw = xs.t().dot(&g);
        gw.scaled_add(wd, &model.weight);
        model.weight.scaled_add(-step, &gw);
        model.bias.scaled_add(-step, &g.sum_axis(Axis(0)));
    }
    Ok(model)
}

/// Scores a classifier: accuracy for single-label tasks, mAP for multilabel.
pub fn evaluate_scores(scores: &Array2<f64>, labels: &[Vec<usize>], multilabel: bool) -> Result<(String, f64, Vec<f64>)> {
    let classes = scores.ncols();
    check_labels(labels, classes, multilabel)?;
    if multilabel {
        let t = targets(labels, classes).mapv(|v| v > 0.5);
        let r = mean_average_precision(scores, &t)?;
        let per = r.per_class.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        Ok(("mAP".into(), r.map, per))
    } else {
        let y: Vec<usize> = labels.iter().map(|l| l[0]).collect();
        let (acc, per) = accuracy(scores, &y);
        Ok(("accuracy".into(), acc, per))
    }
}

/// Trains a linear classifier on frozen training features and reports on the
/// test features.
pub fn linear_probe(
    train_x: &Array2<f64>,
    train_labels: &[Vec<usize>],
    test_x: &Array2<f64>,
    test_labels: &[Vec<usize>],
    classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let model = fit_linear(train_x, train_labels, classes, cfg.multilabel, cfg.probe_lr, cfg.probe_epochs, cfg.probe_wd)?;
    let (metric, value, per_class) = evaluate_scores(&model.scores(test_x), test_labels, cfg.multilabel)?;
    Ok(EvalReport {
        metric,
        value,
        per_class,
        num_examples: test_labels.len(),
        fingerprint: String::new(),
        notes: vec![("protocol".into(), "linear_probe".into())],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n_per: usize, classes: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<Vec<usize>>) {
        let mut r = seeded(seed);
        let dim = 8;
        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| r.gen_range(-sep..sep)).collect())
            .collect();
        let mut x = Array2::zeros((n_per * classes, dim));
        let mut y = Vec::new();
        for c in 0..classes {
            for i in 0..n_per {
                for d in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut r);
                    x[[c * n_per + i, d]] = centers[c][d] + z;
                }
                y.push(vec![c]);
            }
        }
        (x, y)
    }

    #[test]
    fn gram_norm_of_orthogonal_columns() {
        // Columns (centered) are orthogonal with squared norms 4n and n, so
        // the augmented Gram matrix / n is diag(4, 1, 1).
        let x = ndarray::array![[2.0, 1.0], [-2.0, 1.0], [2.0, -1.0], [-2.0, -1.0]];
        assert!((gram_spectral_norm(&x) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn probe_reaches_stationary_point() {
        let (x, y) = blobs(40, 3, 0.7, 9);
        let wd = 1e-2;
        let m = fit_linear(&x, &y, 3, false, 1.0, 5000, wd).unwrap();
        let xs = m.standardize(&x);
        let mut p = m.scores(&x);
        link(&mut p, false);
        let g = (p - targets(&y, 3)) / x.nrows() as f64;
        let mut gw = xs.t().dot(&g);
        gw.scaled_add(wd, &m.weight);
        let norm = gw.iter().chain(g.sum_axis(Axis(0)).iter()).fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(norm < 1e-6, "{norm}");
    }

    #[test]
    fn separable_pair_is_perfect() {
        let x = ndarray::array![[-2.0, 0.1], [-1.5, -0.3], [-3.0, 0.2], [1.8, 0.0], [2.5, 0.4], [1.1, -0.2]];
        let y: Vec<Vec<usize>> = [0, 0, 0, 1, 1, 1].iter().map(|&c| vec![c]).collect();
        let r = linear_probe(&x, &y, &x, &y, 2, &EvalConfig::default()).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let mut accs = Vec::new();
        for seed in 0..10 {
            let (x, mut y) = blobs(100, 4, 2.0, seed);
            y.shuffle(&mut seeded(100 + seed));
            let (xt, yt) = (x.slice(ndarray::s![..200, ..]).to_owned(), y[..200].to_vec());
            let (xe, ye) = (x.slice(ndarray::s![200.., ..]).to_owned(), y[200..].to_vec());
            accs.push(linear_probe(&xt, &yt, &xe, &ye, 4, &EvalConfig::default()).unwrap().value);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.25).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn duplicated_training_set_gives_same_predictions() {
        let (x, y) = blobs(30, 3, 1.0, 4);
        let cfg = EvalConfig::default();
        let a = fit_linear(&x, &y, 3, false, cfg.probe_lr, cfg.probe_epochs, cfg.probe_wd).unwrap();
        let x2 = ndarray::concatenate![Axis(0), x, x];
        let y2: Vec<Vec<usize>> = y.iter().chain(y.iter()).cloned().collect();
        let b = fit_linear(&x2, &y2, 3, false, cfg.probe_lr, cfg.probe_epochs, cfg.probe_wd).unwrap();
        let (sa, sb) = (a.scores(&x), b.scores(&x));
        for (ra, rb) in sa.rows().into_iter().zip(sb.rows()) {
            let arg = |r: ndarray::ArrayView1<f64>| r.iter().enumerate().fold((0, f64::MIN), |m, (i, &v)| if v > m.1 { (i, v) } else { m }).0;
            assert_eq!(arg(ra), arg(rb));
        }
        assert!((&sa - &sb).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn missing_training_class_is_degenerate() {
        let (x, y) = blobs(5, 2, 1.0, 1);
        assert!(matches!(
            fit_linear(&x, &y, 3, false, 1.0, 10, 0.0),
            Err(AsitError::DegenerateSplit(_))
        ));
    }

    #[test]
    fn multilabel_reports_map() {
        let (x, y) = blobs(20, 2, 3.0, 2);
        let cfg = EvalConfig {
            multilabel: true,
            ..Default::default()
        };
        let r = linear_probe(&x, &y, &x, &y, 2, &cfg).unwrap();
        assert_eq!(r.metric, "mAP");
        assert!(r.value > 0.9);
    }
}
