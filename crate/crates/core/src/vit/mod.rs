//! Vision transformer backbone and the reconstruction / local / global heads.

mod attention;
mod encoder;
mod heads;
mod layers;
pub mod params;

use ndarray::{s, Array2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AsitError, Result};
use crate::scalar::Scalar;

pub use attention::Attention;
pub use encoder::{mean_data_tokens, merge_tokens, split_tokens, Backbone, BackboneCache, Block};
pub use heads::{
    l2_normalize_rows, ClassifierCache, ClassifierHead, ProjectionMlp, ReconCache, ReconHead, TileDecoder,
    WeightNormLinear, L2_EPS,
};
pub use layers::{gelu, log_softmax_rows, softmax_rows, trunc_normal, LayerNorm, Linear};
pub use params::{ParamMut, ParamRef, Parameters};

use params::impl_parameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub depth: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::preset(Variant::Base)
    }
}

impl BackboneConfig {
    /// `tiny`: 12 x 192 / 3 heads, `small`: 12 x 384 / 3 heads,
    /// `base`: 12 x 768 / 6 heads. `custom` starts from `tiny`.
    pub fn preset(variant: Variant) -> Self {
        let (depth, embed_dim, n_heads) = match variant {
            Variant::Tiny | Variant::Custom => (12, 192, 3),
            Variant::Small => (12, 384, 3),
            Variant::Base => (12, 768, 6),
        };
        BackboneConfig {
            variant,
            depth,
            embed_dim,
            n_heads,
            mlp_ratio: 4.0,
            patch_size: 16,
        }
    }

    pub fn custom(depth: usize, embed_dim: usize, n_heads: usize, patch_size: usize) -> Self {
        BackboneConfig {
            variant: Variant::Custom,
            depth,
            embed_dim,
            n_heads,
            mlp_ratio: 4.0,
            patch_size,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(AsitError::config("backbone.depth", "must be >= 1"));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(AsitError::config(
                "backbone.n_heads",
                format!("embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads),
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(AsitError::config("backbone.mlp_ratio", "must be > 0"));
        }
        if self.patch_size == 0 {
            return Err(AsitError::config("backbone.patch_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Backbone parameter count for a token grid (no heads).
    pub fn param_count(&self, grid: &PatchGrid) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let p2 = grid.patch_size * grid.patch_size;
        let block = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
        (p2 * d + d) + d + (1 + grid.n_tokens()) * d + self.depth * block + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    /// K, local (per-token) pseudo-classes.
    pub local_classes: usize,
    /// C, global (class-token) pseudo-classes.
    pub global_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 2048,
            bottleneck: 256,
            local_classes: 1024,
            global_classes: 8192,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("heads.hidden", self.hidden),
            ("heads.bottleneck", self.bottleneck),
            ("heads.local_classes", self.local_classes),
            ("heads.global_classes", self.global_classes),
        ] {
            if v == 0 {
                return Err(AsitError::config(k, "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Tiling of a `T x F` spectrogram into `p x p` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_t: usize,
    pub grid_f: usize,
}

impl PatchGrid {
    /// Grid after padding `frames x bins` up to multiples of `p`.
    pub fn for_shape(frames: usize, bins: usize, p: usize) -> Self {
        PatchGrid {
            patch_size: p,
            grid_t: frames.div_ceil(p),
            grid_f: bins.div_ceil(p),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_t * self.grid_f
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        (self.grid_t * self.patch_size, self.grid_f * self.patch_size)
    }
}

/// Row `i` is the row-major flattening of tile `i`; tiles run row-major over
/// the (time, frequency) grid. Shapes not divisible by `p` are zero-padded.
pub fn patchify<S: Scalar>(values: &Array2<f64>, p: usize) -> Array2<S> {
    let grid = PatchGrid::for_shape(values.nrows(), values.ncols(), p);
    let mut out = Array2::zeros((grid.n_tokens(), p * p));
    patchify_into(values, &grid, out.view_mut());
    out
}

fn patchify_into<S: Scalar>(values: &Array2<f64>, grid: &PatchGrid, mut out: ArrayViewMut2<S>) {
    let p = grid.patch_size;
    let (t, f) = values.dim();
    for ti in 0..grid.grid_t {
        for fi in 0..grid.grid_f {
            let mut row = out.row_mut(ti * grid.grid_f + fi);
            for i in 0..p {
                for j in 0..p {
                    let (r, c) = (ti * p + i, fi * p + j);
                    row[i * p + j] = if r < t && c < f {
                        S::lit(values[[r, c]])
                    } else {
                        S::zero()
                    };
                }
            }
        }
    }
}

/// Stacks the patches of several spectrograms row-wise.
pub fn patchify_batch<S: Scalar>(batch: &[&Array2<f64>], grid: &PatchGrid) -> Array2<S> {
    let n = grid.n_tokens();
    let p2 = grid.patch_size * grid.patch_size;
    let mut out = Array2::zeros((batch.len() * n, p2));
    for (b, v) in batch.iter().enumerate() {
        patchify_into(v, grid, out.slice_mut(s![b * n..(b + 1) * n, ..]));
    }
    out
}

/// Reassembles `n x p*p` tiles into the padded `grid_t*p x grid_f*p` image.
pub fn unpatchify<S: Scalar>(tiles: &Array2<S>, grid: &PatchGrid) -> Array2<S> {
    let p = grid.patch_size;
    let (pt, pf) = grid.padded_shape();
    let mut out = Array2::zeros((pt, pf));
    for ti in 0..grid.grid_t {
        for fi in 0..grid.grid_f {
            let row = tiles.row(ti * grid.grid_f + fi);
            for i in 0..p {
                for j in 0..p {
                    out[[ti * p + i, fi * p + j]] = row[i * p + j];
                }
            }
        }
    }
    out
}

/// Which heads to evaluate in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSelect {
    pub recon: bool,
    pub local: bool,
    pub global: bool,
}

impl HeadSelect {
    pub const ALL: HeadSelect = HeadSelect {
        recon: true,
        local: true,
        global: true,
    };
    pub const NONE: HeadSelect = HeadSelect {
        recon: false,
        local: false,
        global: false,
    };
}

/// Backbone plus reconstruction, local and global projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AsitModel<S> {
    pub backbone: Backbone<S>,
    pub recon: ReconHead<S>,
    pub local: ClassifierHead<S>,
    pub global: ClassifierHead<S>,
}

impl_parameters!(AsitModel { backbone, recon, local, global });

pub struct ForwardPass<S> {
    pub batch: usize,
    /// `batch x dim`
    pub cls: Array2<S>,
    /// `batch * n x dim`
    pub data: Array2<S>,
    /// `batch * n x p*p` reconstructed tiles.
    pub recon: Option<Array2<S>>,
    /// `batch * n x K`
    pub local: Option<Array2<S>>,
    /// `batch x C`
    pub global: Option<Array2<S>>,
    backbone_cache: BackboneCache<S>,
    recon_cache: Option<ReconCache<S>>,
    local_cache: Option<ClassifierCache<S>>,
    global_cache: Option<ClassifierCache<S>>,
}

/// Output gradients for [`AsitModel::backward`].
#[derive(Default)]
pub struct HeadGrads<S> {
    pub recon: Option<Array2<S>>,
    pub local: Option<Array2<S>>,
    pub global: Option<Array2<S>>,
}

impl<S: Scalar> AsitModel<S> {
    pub fn init<R: Rng + ?Sized>(bb: &BackboneConfig, heads: &HeadConfig, grid: &PatchGrid, rng: &mut R) -> Self {
        let d = bb.embed_dim;
        AsitModel {
            backbone: Backbone::init(bb, grid, rng),
            recon: ReconHead::init(d, heads.hidden, heads.bottleneck, grid.patch_size, rng),
            local: ClassifierHead::init(d, heads.hidden, heads.bottleneck, heads.local_classes, rng),
            global: ClassifierHead::init(d, heads.hidden, heads.bottleneck, heads.global_classes, rng),
        }
    }

    pub fn forward(&self, patches: &Array2<S>, batch: usize, select: HeadSelect) -> Result<ForwardPass<S>> {
        let (tokens, backbone_cache) = self.backbone.forward(patches, batch)?;
        let (cls, data) = split_tokens(&tokens, batch);
        let (recon, recon_cache) = if select.recon {
            let (r, c) = self.recon.forward(&data);
            (Some(r), Some(c))
        } else {
            (None, None)
        };
        let (local, local_cache) = if select.local {
            let (r, c) = self.local.forward(&data);
            (Some(r), Some(c))
        } else {
            (None, None)
        };
        let (global, global_cache) = if select.global {
            let (r, c) = self.global.forward(&cls);
            (Some(r), Some(c))
        } else {
            (None, None)
        };
        for (name, out) in [("recon head", &recon), ("local head", &local), ("global head", &global)] {
            if let Some(o) = out {
                if o.iter().any(|v| !v.is_finite()) {
                    return Err(AsitError::NumericFault {
                        site: name.into(),
                        detail: "non-finite output".into(),
                    });
                }
            }
        }
        Ok(ForwardPass {
            batch,
            cls,
            data,
            recon,
            local,
            global,
            backbone_cache,
            recon_cache,
            local_cache,
            global_cache,
        })
    }

    /// Accumulates into `grad` the parameter gradients given output gradients.
    /// Extra `d_cls` / `d_data` feed the encoder outputs directly.
    pub fn backward(
        &self,
        fwd: &ForwardPass<S>,
        heads: &HeadGrads<S>,
        d_cls: Option<&Array2<S>>,
        d_data: Option<&Array2<S>>,
        grad: &mut AsitModel<S>,
    ) {
        let mut dcls = Array2::zeros(fwd.cls.raw_dim());
        let mut ddata = Array2::zeros(fwd.data.raw_dim());
        if let (Some(g), Some(c)) = (&heads.recon, &fwd.recon_cache) {
            ddata += &self.recon.backward(c, g, &mut grad.recon);
        }
        if let (Some(g), Some(c)) = (&heads.local, &fwd.local_cache) {
            ddata += &self.local.backward(c, g, &mut grad.local);
        }
        if let (Some(g), Some(c)) = (&heads.global, &fwd.global_cache) {
            dcls += &self.global.backward(c, g, &mut grad.global);
        }
        if let Some(g) = d_cls {
            dcls += g;
        }
        if let Some(g) = d_data {
            ddata += g;
        }
        let dtokens = merge_tokens(&dcls, &ddata, fwd.batch);
        self.backbone.backward(&fwd.backbone_cache, &dtokens, &mut grad.backbone);
    }
}
