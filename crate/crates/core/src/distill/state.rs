use ndarray::{Array1, Array2, Axis};

use crate::error::{AsitError, Result};
use crate::scalar::Scalar;
use crate::vit::{AsitModel, Parameters};

/// Student, EMA teacher and the teacher-side centers.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinModelState<S> {
    pub student: AsitModel<S>,
    pub teacher: AsitModel<S>,
    /// Running mean of the teacher's global logits (length C).
    pub global_center: Array1<S>,
    /// Running mean of the teacher's local logits (length K).
    pub local_center: Array1<S>,
    pub step: u64,
}

impl<S: Scalar> TwinModelState<S> {
    /// Teacher starts as an exact copy of the student; centers at zero.
    pub fn new(student: AsitModel<S>) -> Self {
        let teacher = student.clone();
        TwinModelState {
            global_center: Array1::zeros(student.global.classes()),
            local_center: Array1::zeros(student.local.classes()),
            student,
            teacher,
            step: 0,
        }
    }

    pub fn check_consistent(&self) -> Result<()> {
        same_layout(&self.teacher, &self.student)?;
        if self.global_center.len() != self.student.global.classes()
            || self.local_center.len() != self.student.local.classes()
        {
            return Err(AsitError::Corruption("center length differs from head width".into()));
        }
        if !self.global_center.iter().chain(self.local_center.iter()).all(|v| v.is_finite()) {
            return Err(AsitError::Corruption("non-finite center".into()));
        }
        Ok(())
    }
}

fn same_layout<S: Scalar, M: Parameters<S>>(a: &M, b: &M) -> Result<()> {
    let (pa, pb) = (a.params(), b.params());
    if pa.len() != pb.len() {
        return Err(AsitError::Corruption(format!(
            "teacher has {} tensors, student {}",
            pa.len(),
            pb.len()
        )));
    }
    for (x, y) in pa.iter().zip(&pb) {
        if x.name != y.name || x.shape != y.shape {
            return Err(AsitError::Corruption(format!(
                "teacher tensor `{}` {:?} vs student `{}` {:?}",
                x.name, x.shape, y.name, y.shape
            )));
        }
    }
    Ok(())
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, elementwise.
pub fn ema_update<S: Scalar, M: Parameters<S>>(teacher: &mut M, student: &M, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AsitError::Argument(format!("EMA momentum {lambda} outside [0, 1]")));
    }
    same_layout(teacher, student)?;
    if lambda == 1.0 {
        return Ok(());
    }
    let (l, c) = (S::lit(lambda), S::lit(1.0 - lambda));
    for (t, s) in teacher.params_mut().into_iter().zip(student.params()) {
        if lambda == 0.0 {
            t.data.copy_from_slice(s.data);
        } else {
            for (ti, &si) in t.data.iter_mut().zip(s.data) {
                *ti = l * *ti + c * si;
            }
        }
    }
    Ok(())
}

/// `center <- m * center + (1 - m) * mean over rows of teacher_logits`.
pub fn update_center<S: Scalar>(center: &mut Array1<S>, teacher_logits: &Array2<S>, m: f64) {
    let Some(mean) = teacher_logits.mean_axis(Axis(0)) else {
        return;
    };
    let (a, b) = (S::lit(m), S::lit(1.0 - m));
    center.zip_mut_with(&mean, |c, &x| *c = a * *c + b * x);
}
