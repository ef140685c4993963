use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::dsp::fit_frames;
use crate::error::{AsitError, Result};
use crate::scalar::Scalar;
use crate::vit::{mean_data_tokens, patchify_batch, split_tokens, Backbone, PatchGrid};

/// Which encoder output summarizes a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Final-layer class token.
    Cls,
    /// Mean of the final-layer data tokens.
    Mean,
}

/// Center-crops or zero-pads the time axis to the grid's padded length.
pub fn fit_to_grid(values: &Array2<f64>, grid: &PatchGrid) -> Result<Array2<f64>> {
    let (t, f) = grid.padded_shape();
    if values.ncols() > f {
        return Err(AsitError::Argument(format!(
            "{} mel bins exceed the model's {} frequency pixels",
            values.ncols(),
            f
        )));
    }
    if values.nrows() == t {
        Ok(values.clone())
    } else {
        Ok(fit_frames(values, t))
    }
}

pub(crate) fn pool<S: Scalar>(out: &Array2<S>, batch: usize, pooling: Pooling) -> Array2<S> {
    let (cls, data) = split_tokens(out, batch);
    match pooling {
        Pooling::Cls => cls,
        Pooling::Mean => mean_data_tokens(&data, batch),
    }
}

/// One embedding row per clip, computed in chunks of `chunk` clips.
pub fn extract_features(
    backbone: &Backbone<f32>,
    grid: &PatchGrid,
    clips: &[&Array2<f64>],
    pooling: Pooling,
    chunk: usize,
) -> Result<Array2<f64>> {
    if grid.n_tokens() != backbone.n_tokens() {
        return Err(AsitError::Load(format!(
            "model has {} positions, grid {} tokens",
            backbone.n_tokens(),
            grid.n_tokens()
        )));
    }
    let mut out = Array2::zeros((clips.len(), backbone.embed_dim()));
    for (ci, part) in clips.chunks(chunk.max(1)).enumerate() {
        let fitted = part.iter().map(|c| fit_to_grid(c, grid)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Array2<f64>> = fitted.iter().collect();
        let x = patchify_batch::<f32>(&refs, grid);
        let (tokens, _) = backbone.forward(&x, part.len())?;
        let pooled = pool(&tokens, part.len(), pooling);
        let start = ci * chunk.max(1);
        out.slice_mut(s![start..start + part.len(), ..])
            .assign(&pooled.mapv(|v| v as f64));
    }
    Ok(out)
}
