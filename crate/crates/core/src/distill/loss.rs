use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{AsitError, Result};
use crate::scalar::Scalar;
use crate::vit::{log_softmax_rows, softmax_rows};

/// How masked losses are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Divide by the number of masked pixels / tokens.
    Mean,
    /// Plain sum over masked entries.
    Sum,
}

/// A loss value with the gradient w.r.t. its first argument. `empty` is set
/// when the mask selected nothing and the loss is 0 by convention.
#[derive(Debug, Clone)]
pub struct MaskedLoss<S> {
    pub value: f64,
    pub grad: Array2<S>,
    pub empty: bool,
}

fn check_shape<S>(what: &str, a: &Array2<S>, b: (usize, usize)) -> Result<()> {
    if a.dim() != b {
        return Err(AsitError::Argument(format!("{what} shape {:?} != {:?}", a.dim(), b)));
    }
    Ok(())
}

/// L1 reconstruction error over masked entries only.
pub fn recon_loss<S: Scalar>(
    pred: &Array2<S>,
    target: &Array2<S>,
    mask: &Array2<bool>,
    reduction: Reduction,
) -> Result<MaskedLoss<S>> {
    check_shape("target", target, pred.dim())?;
    check_shape("mask", mask, pred.dim())?;
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = Array2::zeros(pred.dim());
    if count == 0 {
        log::warn!("reconstruction mask is empty; loss set to 0");
        return Ok(MaskedLoss {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / count as f64,
        Reduction::Sum => 1.0,
    };
    let mut total = 0.0;
    let s = S::lit(scale);
    Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .and(mask)
        .for_each(|g, &p, &t, &m| {
            if m {
                let d = p - t;
                total += d.to_f64_lossy().abs();
                *g = if d > S::zero() {
                    s
                } else if d < S::zero() {
                    -s
                } else {
                    S::zero()
                };
            }
        });
    Ok(MaskedLoss {
        value: total * scale,
        grad,
        empty: false,
    })
}

/// Row-wise `softmax(logits / tau)`.
pub fn sharpen<S: Scalar>(logits: &Array2<S>, tau: f64) -> Array2<S> {
    let mut p = logits / S::lit(tau);
    softmax_rows(&mut p);
    p
}

/// Subtracts the running center from every row, then sharpens.
pub fn center_then_sharpen<S: Scalar>(logits: &Array2<S>, center: &Array1<S>, tau: f64) -> Array2<S> {
    let mut p = logits - center;
    p /= S::lit(tau);
    softmax_rows(&mut p);
    p
}

/// Shannon entropy (nats) of each row.
pub fn row_entropy<S: Scalar>(p: &Array2<S>) -> Vec<f64> {
    p.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .map(|&v| v.to_f64_lossy())
                .filter(|&v| v > 0.0)
                .map(|v| -v * v.ln())
                .sum()
        })
        .collect()
}

/// Per-row cross-entropy `-sum_j t_j log softmax(z / tau)_j` and its gradient
/// w.r.t. `z`, scaled by `weight[row]`.
fn weighted_cross_entropy<S: Scalar>(
    student_logits: &Array2<S>,
    teacher_probs: &Array2<S>,
    tau: f64,
    weight: impl Fn(usize) -> f64,
) -> (f64, Array2<S>) {
    let scaled = student_logits / S::lit(tau);
    let logp = log_softmax_rows(&scaled);
    let mut grad = Array2::zeros(student_logits.dim());
    let mut total = 0.0;
    for (i, ((lp, t), mut g)) in logp
        .rows()
        .into_iter()
        .zip(teacher_probs.rows())
        .zip(grad.rows_mut())
        .enumerate()
    {
        let w = weight(i);
        if w == 0.0 {
            continue;
        }
        let mass: S = t.sum();
        let ce: f64 = lp
            .iter()
            .zip(t.iter())
            .map(|(&l, &p)| -(p.to_f64_lossy() * l.to_f64_lossy()))
            .sum();
        total += w * ce;
        let k = S::lit(w / tau);
        Zip::from(&mut g).and(&lp).and(&t).for_each(|gi, &l, &p| {
            *gi = (mass * l.exp() - p) * k;
        });
    }
    (total, grad)
}

/// Cross-entropy between teacher and student token distributions over the
/// masked tokens. Gradients flow only into the student logits.
pub fn local_distill_loss<S: Scalar>(
    student_logits: &Array2<S>,
    teacher_probs: &Array2<S>,
    token_mask: &[bool],
    tau_s: f64,
    reduction: Reduction,
) -> Result<MaskedLoss<S>> {
    check_shape("teacher probabilities", teacher_probs, student_logits.dim())?;
    if token_mask.len() != student_logits.nrows() {
        return Err(AsitError::Argument(format!(
            "token mask has {} entries for {} tokens",
            token_mask.len(),
            student_logits.nrows()
        )));
    }
    let count = token_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        log::warn!("token mask is empty; local loss set to 0");
        return Ok(MaskedLoss {
            value: 0.0,
            grad: Array2::zeros(student_logits.dim()),
            empty: true,
        });
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / count as f64,
        Reduction::Sum => 1.0,
    };
    let (value, grad) = weighted_cross_entropy(student_logits, teacher_probs, tau_s, |i| {
        if token_mask[i] {
            scale
        } else {
            0.0
        }
    });
    Ok(MaskedLoss {
        value,
        grad,
        empty: false,
    })
}

#[derive(Debug, Clone)]
pub struct GlobalLoss<S> {
    pub value: f64,
    pub grad_a: Array2<S>,
    pub grad_b: Array2<S>,
}

/// Symmetric cross-view loss: the student's view-a output is matched to the
/// teacher's view-b output and vice versa, averaged over the batch.
pub fn global_distill_loss<S: Scalar>(
    student_a: &Array2<S>,
    student_b: &Array2<S>,
    teacher_a: &Array2<S>,
    teacher_b: &Array2<S>,
    tau_s: f64,
) -> Result<GlobalLoss<S>> {
    let dim = student_a.dim();
    for (what, m) in [("student view b", student_b), ("teacher view a", teacher_a), ("teacher view b", teacher_b)] {
        check_shape(what, m, dim)?;
    }
    if dim.0 == 0 {
        return Err(AsitError::Argument("empty batch".into()));
    }
    let w = 0.5 / dim.0 as f64;
    let (la, grad_a) = weighted_cross_entropy(student_a, teacher_b, tau_s, |_| w);
    let (lb, grad_b) = weighted_cross_entropy(student_b, teacher_a, tau_s, |_| w);
    Ok(GlobalLoss {
        value: la + lb,
        grad_a,
        grad_b,
    })
}

/// Which of the three objectives are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskToggles {
    pub recon: bool,
    pub lcl: bool,
    pub gcl: bool,
}

impl Default for TaskToggles {
    fn default() -> Self {
        TaskToggles {
            recon: true,
            lcl: true,
            gcl: true,
        }
    }
}

impl TaskToggles {
    pub fn validate(&self) -> Result<()> {
        if !(self.recon || self.lcl || self.gcl) {
            return Err(AsitError::config("train.tasks", "at least one of recon, lcl, gcl must be enabled"));
        }
        Ok(())
    }

    fn as_array(&self) -> [bool; 3] {
        [self.recon, self.lcl, self.gcl]
    }
}

/// `(recons, lcl, gcl)` loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub recons: f64,
    pub lcl: f64,
    pub gcl: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; 3] {
        [self.recons, self.lcl, self.gcl]
    }
}

/// Weight of each part in the total: `alpha_i / #enabled` when enabled, else 0.
pub fn loss_weights(toggles: &TaskToggles, alpha: [f64; 3]) -> Result<[f64; 3]> {
    toggles.validate()?;
    let on = toggles.as_array();
    let n = on.iter().filter(|&&b| b).count() as f64;
    let mut w = [0.0; 3];
    for i in 0..3 {
        if on[i] {
            w[i] = alpha[i] / n;
        }
    }
    Ok(w)
}

/// Mean of the enabled, alpha-weighted parts.
pub fn total_loss(parts: &LossParts, toggles: &TaskToggles, alpha: [f64; 3]) -> Result<f64> {
    let w = loss_weights(toggles, alpha)?;
    Ok(parts.as_array().iter().zip(w).map(|(p, w)| p * w).sum())
}
