use crate::error::{AsitError, Result};
use crate::scalar::Scalar;
use crate::vit::Parameters;

/// Adam with decoupled weight decay. Decay applies to tensors with at least
/// two dimensions; biases and norm parameters are left alone.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<M> {
    pub m: M,
    pub v: M,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<M: Clone> AdamW<M> {
    pub fn new<S: Scalar>(params: &M, beta1: f64, beta2: f64, eps: f64) -> Self
    where
        M: Parameters<S>,
    {
        let z = params.zeros_like();
        AdamW {
            m: z.clone(),
            v: z,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step<S: Scalar>(&mut self, params: &mut M, grad: &M, lr: f64, weight_decay: f64) -> Result<()>
    where
        M: Parameters<S>,
    {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (c1, c2) = (S::lit(1.0 - self.beta1), S::lit(1.0 - self.beta2));
        let step_size = S::lit(lr / bc1);
        let bc2_sqrt = S::lit(bc2.sqrt());
        let eps = S::lit(self.eps);
        let grads = grad.params();
        let mut ms = self.m.params_mut();
        let mut vs = self.v.params_mut();
        let mut ps = params.params_mut();
        if grads.len() != ps.len() || ms.len() != ps.len() || vs.len() != ps.len() {
            return Err(AsitError::Corruption("optimizer state does not match parameters".into()));
        }
        for (((p, g), m), v) in ps.iter_mut().zip(&grads).zip(ms.iter_mut()).zip(vs.iter_mut()) {
            if p.data.len() != g.data.len() || p.data.len() != m.data.len() || p.data.len() != v.data.len() {
                return Err(AsitError::Corruption(format!("optimizer tensor `{}` has the wrong size", p.name)));
            }
            let decay = if p.shape.len() >= 2 {
                S::lit(1.0 - lr * weight_decay)
            } else {
                S::one()
            };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + c1 * gi;
                v.data[i] = b2 * v.data[i] + c2 * gi * gi;
                let denom = v.data[i].sqrt() / bc2_sqrt + eps;
                p.data[i] = p.data[i] * decay - step_size * m.data[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p: Array1<f64> = array![1.0, -2.0, 0.5];
        let g: Array1<f64> = array![0.3, -4.0, 0.0];
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8);
        opt.step(&mut p, &g, 0.1, 0.5).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps); no decay on 1-d tensors
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn decay_only_on_matrices() {
        let mut w: Array2<f64> = array![[2.0]];
        let mut opt = AdamW::new(&w, 0.9, 0.999, 1e-8);
        opt.step(&mut w, &array![[0.0]], 0.1, 0.5).unwrap();
        assert!((w[[0, 0]] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_recurrence() {
        let mut p: Array1<f64> = array![0.7];
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.7f64);
        for t in 1..=5 {
            let g = 2.0 * x - 1.0;
            let grad = array![2.0 * p[0] - 1.0];
            opt.step(&mut p, &grad, 0.01, 0.0).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - x).abs() < 1e-12);
        }
    }
}
