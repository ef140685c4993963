use ndarray::{s, Array2};
use rand::Rng;

use super::layers::{softmax_rows, Linear};
use super::params::impl_parameters;
use crate::scalar::Scalar;

/// Multi-head self-attention over `batch` sequences stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<S> {
    pub qkv: Linear<S>,
    pub proj: Linear<S>,
}

impl_parameters!(Attention { qkv, proj });

pub struct AttentionCache<S> {
    qkv: Array2<S>,
    /// One `N x N` probability matrix per (sequence, head).
    probs: Vec<Array2<S>>,
    ctx: Array2<S>,
}

impl<S: Scalar> Attention<S> {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Attention {
            qkv: Linear::init(dim, 3 * dim, rng),
            proj: Linear::init(dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<S>, batch: usize, heads: usize) -> (Array2<S>, AttentionCache<S>) {
        let dim = self.proj.d_in();
        let n = x.nrows() / batch;
        let dh = dim / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let qkv = self.qkv.forward(x);
        let mut ctx = Array2::zeros((x.nrows(), dim));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rows = b * n..(b + 1) * n;
            for h in 0..heads {
                let c = h * dh;
                let q = qkv.slice(s![rows.clone(), c..c + dh]);
                let k = qkv.slice(s![rows.clone(), dim + c..dim + c + dh]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + c..2 * dim + c + dh]);
                let mut p = q.dot(&k.t());
                p *= scale;
                softmax_rows(&mut p);
                ctx.slice_mut(s![rows.clone(), c..c + dh]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let out = self.proj.forward(&ctx);
        (out, AttentionCache { qkv, probs, ctx })
    }

    pub fn backward(
        &self,
        x: &Array2<S>,
        cache: &AttentionCache<S>,
        dy: &Array2<S>,
        batch: usize,
        heads: usize,
        grad: &mut Attention<S>,
    ) -> Array2<S> {
        let dim = self.proj.d_in();
        let n = x.nrows() / batch;
        let dh = dim / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let dctx = self.proj.backward(&cache.ctx, dy, &mut grad.proj);
        let qkv = &cache.qkv;
        let mut dqkv = Array2::zeros(qkv.raw_dim());
        for b in 0..batch {
            let rows = b * n..(b + 1) * n;
            for h in 0..heads {
                let c = h * dh;
                let p = &cache.probs[b * heads + h];
                let q = qkv.slice(s![rows.clone(), c..c + dh]);
                let k = qkv.slice(s![rows.clone(), dim + c..dim + c + dh]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + c..2 * dim + c + dh]);
                let dc = dctx.slice(s![rows.clone(), c..c + dh]);
                let dv = p.t().dot(&dc);
                let mut ds = dc.dot(&v.t());
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: S = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow.iter()) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), c..c + dh]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), dim + c..dim + c + dh]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * dim + c..2 * dim + c + dh]).assign(&dv);
            }
        }
        self.qkv.backward(x, &dqkv, &mut grad.qkv)
    }
}
