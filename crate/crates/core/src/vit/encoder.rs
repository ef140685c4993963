use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::attention::{Attention, AttentionCache};
use super::layers::{gelu, gelu_backward, trunc_normal, LayerNorm, LayerNormCache, Linear};
use super::params::impl_parameters;
use super::{BackboneConfig, PatchGrid};
use crate::error::{AsitError, Result};
use crate::scalar::Scalar;

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub norm1: LayerNorm<S>,
    pub attn: Attention<S>,
    pub norm2: LayerNorm<S>,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl_parameters!(Block { norm1, attn, norm2, fc1, fc2 });

pub struct BlockCache<S> {
    ln1: LayerNormCache<S>,
    a_in: Array2<S>,
    attn: AttentionCache<S>,
    ln2: LayerNormCache<S>,
    m_in: Array2<S>,
    u: Array2<S>,
    g: Array2<S>,
}

impl<S: Scalar> Block<S> {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Block {
            norm1: LayerNorm::new(dim),
            attn: Attention::init(dim, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::init(dim, hidden, rng),
            fc2: Linear::init(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: Array2<S>, batch: usize, heads: usize) -> (Array2<S>, BlockCache<S>) {
        let (a_in, ln1) = self.norm1.forward(&x);
        let (a, attn) = self.attn.forward(&a_in, batch, heads);
        let h = &x + &a;
        let (m_in, ln2) = self.norm2.forward(&h);
        let u = self.fc1.forward(&m_in);
        let g = gelu(&u);
        let y = &h + &self.fc2.forward(&g);
        (
            y,
            BlockCache {
                ln1,
                a_in,
                attn,
                ln2,
                m_in,
                u,
                g,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BlockCache<S>,
        dy: &Array2<S>,
        batch: usize,
        heads: usize,
        grad: &mut Block<S>,
    ) -> Array2<S> {
        let dg = self.fc2.backward(&cache.g, dy, &mut grad.fc2);
        let du = gelu_backward(&cache.u, &dg);
        let dm_in = self.fc1.backward(&cache.m_in, &du, &mut grad.fc1);
        let mut dh = self.norm2.backward(&cache.ln2, &dm_in, &mut grad.norm2);
        dh += dy;
        let da_in = self
            .attn
            .backward(&cache.a_in, &cache.attn, &dh, batch, heads, &mut grad.attn);
        let mut dx = self.norm1.backward(&cache.ln1, &da_in, &mut grad.norm1);
        dx += &dh;
        dx
    }
}

/// Patch projection, class token, learned positions, blocks, final norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<S> {
    pub patch_embed: Linear<S>,
    /// `1 x dim`
    pub cls_token: Array2<S>,
    /// `(1 + n) x dim`; row 0 belongs to the class token.
    pub pos_embed: Array2<S>,
    pub blocks: Vec<Block<S>>,
    pub norm: LayerNorm<S>,
    pub heads: usize,
}

impl_parameters!(Backbone { patch_embed, cls_token, pos_embed, blocks, norm });

pub struct BackboneCache<S> {
    patches: Array2<S>,
    blocks: Vec<BlockCache<S>>,
    norm: LayerNormCache<S>,
    batch: usize,
}

impl<S: Scalar> Backbone<S> {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, grid: &PatchGrid, rng: &mut R) -> Self {
        let dim = cfg.embed_dim;
        let hidden = (dim as f64 * cfg.mlp_ratio).round() as usize;
        Backbone {
            patch_embed: Linear::init(grid.patch_size * grid.patch_size, dim, rng),
            cls_token: trunc_normal((1, dim), 0.02, rng),
            pos_embed: trunc_normal((1 + grid.n_tokens(), dim), 0.02, rng),
            blocks: (0..cfg.depth).map(|_| Block::init(dim, hidden, rng)).collect(),
            norm: LayerNorm::new(dim),
            heads: cfg.n_heads,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.patch_embed.d_out()
    }

    pub fn n_tokens(&self) -> usize {
        self.pos_embed.nrows() - 1
    }

    /// Encodes `batch` sequences of patches stacked row-wise (`batch * n` rows
    /// of `p*p` pixels). Returns `batch * (1 + n)` rows; row `b * (1 + n)` is
    /// sample `b`'s class token.
    pub fn forward(&self, patches: &Array2<S>, batch: usize) -> Result<(Array2<S>, BackboneCache<S>)> {
        let n = self.n_tokens();
        if patches.nrows() != batch * n {
            return Err(AsitError::Argument(format!(
                "expected {} patch rows ({batch} x {n}), got {}",
                batch * n,
                patches.nrows()
            )));
        }
        let dim = self.embed_dim();
        let emb = self.patch_embed.forward(patches);
        let mut x = Array2::zeros((batch * (n + 1), dim));
        for b in 0..batch {
            let base = b * (n + 1);
            let mut cls = x.slice_mut(s![base..base + 1, ..]);
            cls.assign(&self.cls_token);
            cls += &self.pos_embed.slice(s![0..1, ..]);
            let mut data = x.slice_mut(s![base + 1..base + 1 + n, ..]);
            data.assign(&emb.slice(s![b * n..(b + 1) * n, ..]));
            data += &self.pos_embed.slice(s![1.., ..]);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block.forward(x, batch, self.heads);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(AsitError::NumericFault {
                    site: format!("encoder block {i}"),
                    detail: "non-finite activation".into(),
                });
            }
            caches.push(cache);
            x = y;
        }
        let (out, norm) = self.norm.forward(&x);
        Ok((
            out,
            BackboneCache {
                patches: patches.clone(),
                blocks: caches,
                norm,
                batch,
            },
        ))
    }

    pub fn backward(&self, cache: &BackboneCache<S>, dout: &Array2<S>, grad: &mut Backbone<S>) {
        let n = self.n_tokens();
        let mut dx = self.norm.backward(&cache.norm, dout, &mut grad.norm);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(&cache.blocks[i], &dx, cache.batch, self.heads, &mut grad.blocks[i]);
        }
        let dim = self.embed_dim();
        let mut demb = Array2::zeros((cache.batch * n, dim));
        for b in 0..cache.batch {
            let base = b * (n + 1);
            let dcls = dx.slice(s![base..base + 1, ..]);
            let ddata = dx.slice(s![base + 1..base + 1 + n, ..]);
            grad.cls_token += &dcls;
            let mut pos0 = grad.pos_embed.slice_mut(s![0..1, ..]);
            pos0 += &dcls;
            let mut pos = grad.pos_embed.slice_mut(s![1.., ..]);
            pos += &ddata;
            demb.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&ddata);
        }
        self.patch_embed.backward(&cache.patches, &demb, &mut grad.patch_embed);
    }

    /// Resamples the data-token positional embeddings to a new grid
    /// (bilinear over the `(time, frequency)` tile grid).
    pub fn resize_positions(&mut self, from: (usize, usize), to: (usize, usize)) -> Result<()> {
        let (ft, ff) = from;
        if ft * ff != self.n_tokens() {
            return Err(AsitError::Argument(format!(
                "grid {ft}x{ff} does not match {} positional embeddings",
                self.n_tokens()
            )));
        }
        if from == to {
            return Ok(());
        }
        let (tt, tf) = to;
        let dim = self.embed_dim();
        let old = self.pos_embed.slice(s![1.., ..]).to_owned();
        let mut new = Array2::zeros((1 + tt * tf, dim));
        new.row_mut(0).assign(&self.pos_embed.row(0));
        let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let p = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (p.floor() as usize).min(src - 1);
            (lo, (lo + 1).min(src - 1), p - lo as f64)
        };
        for i in 0..tt {
            let (t0, t1, wt) = coord(i, ft, tt);
            for j in 0..tf {
                let (f0, f1, wf) = coord(j, ff, tf);
                let (wt, wf) = (S::lit(wt), S::lit(wf));
                let one = S::one();
                let mut row = new.row_mut(1 + i * tf + j);
                for k in 0..dim {
                    let a = old[[t0 * ff + f0, k]] * (one - wf) + old[[t0 * ff + f1, k]] * wf;
                    let b = old[[t1 * ff + f0, k]] * (one - wf) + old[[t1 * ff + f1, k]] * wf;
                    row[k] = a * (one - wt) + b * wt;
                }
            }
        }
        self.pos_embed = new;
        Ok(())
    }
}

/// Splits encoder output rows into class tokens (`batch x dim`) and data
/// tokens (`batch * n x dim`).
pub fn split_tokens<S: Scalar>(out: &Array2<S>, batch: usize) -> (Array2<S>, Array2<S>) {
    let n1 = out.nrows() / batch;
    let dim = out.ncols();
    let mut cls = Array2::zeros((batch, dim));
    let mut data = Array2::zeros((batch * (n1 - 1), dim));
    for b in 0..batch {
        cls.row_mut(b).assign(&out.row(b * n1));
        data.slice_mut(s![b * (n1 - 1)..(b + 1) * (n1 - 1), ..])
            .assign(&out.slice(s![b * n1 + 1..(b + 1) * n1, ..]));
    }
    (cls, data)
}

/// Inverse of [`split_tokens`] for gradients.
pub fn merge_tokens<S: Scalar>(cls: &Array2<S>, data: &Array2<S>, batch: usize) -> Array2<S> {
    let n = data.nrows() / batch;
    let dim = cls.ncols();
    let mut out = Array2::zeros((batch * (n + 1), dim));
    for b in 0..batch {
        out.row_mut(b * (n + 1)).assign(&cls.row(b));
        out.slice_mut(s![b * (n + 1) + 1..(b + 1) * (n + 1), ..])
            .assign(&data.slice(s![b * n..(b + 1) * n, ..]));
    }
    out
}

/// Mean over each sample's data tokens.
pub fn mean_data_tokens<S: Scalar>(data: &Array2<S>, batch: usize) -> Array2<S> {
    let n = data.nrows() / batch;
    let mut out = Array2::zeros((batch, data.ncols()));
    for b in 0..batch {
        out.row_mut(b)
            .assign(&data.slice(s![b * n..(b + 1) * n, ..]).mean_axis(Axis(0)).expect("n > 0"));
    }
    out
}
