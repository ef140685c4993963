use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{gelu, gelu_backward, trunc_normal, Linear};
use super::params::impl_parameters;
use crate::scalar::Scalar;

pub const L2_EPS: f64 = 1e-8;

/// Three fully connected layers: `dim -> hidden -GELU-> hidden -GELU-> bottleneck`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMlp<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
    pub fc3: Linear<S>,
}

impl_parameters!(ProjectionMlp { fc1, fc2, fc3 });

pub struct MlpCache<S> {
    x: Array2<S>,
    u1: Array2<S>,
    g1: Array2<S>,
    u2: Array2<S>,
    g2: Array2<S>,
}

impl<S: Scalar> ProjectionMlp<S> {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, bottleneck: usize, rng: &mut R) -> Self {
        ProjectionMlp {
            fc1: Linear::init(dim, hidden, rng),
            fc2: Linear::init(hidden, hidden, rng),
            fc3: Linear::init(hidden, bottleneck, rng),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, MlpCache<S>) {
        let u1 = self.fc1.forward(x);
        let g1 = gelu(&u1);
        let u2 = self.fc2.forward(&g1);
        let g2 = gelu(&u2);
        let y = self.fc3.forward(&g2);
        (
            y,
            MlpCache {
                x: x.clone(),
                u1,
                g1,
                u2,
                g2,
            },
        )
    }

    pub fn backward(&self, c: &MlpCache<S>, dy: &Array2<S>, grad: &mut ProjectionMlp<S>) -> Array2<S> {
        let dg2 = self.fc3.backward(&c.g2, dy, &mut grad.fc3);
        let du2 = gelu_backward(&c.u2, &dg2);
        let dg1 = self.fc2.backward(&c.g1, &du2, &mut grad.fc2);
        let du1 = gelu_backward(&c.u1, &dg1);
        self.fc1.backward(&c.x, &du1, &mut grad.fc1)
    }
}

/// Transposed convolution with kernel = stride = p and one output channel:
/// each token's bottleneck vector becomes one `p x p` tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileDecoder<S> {
    /// `bottleneck x (p*p)`
    pub weight: Array2<S>,
    /// Single output channel bias.
    pub bias: Array1<S>,
}

impl_parameters!(TileDecoder { weight, bias });

impl<S: Scalar> TileDecoder<S> {
    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        let mut y = x.dot(&self.weight);
        y += self.bias[0];
        y
    }

    pub fn backward(&self, x: &Array2<S>, dy: &Array2<S>, grad: &mut TileDecoder<S>) -> Array2<S> {
        ndarray::linalg::general_mat_mul(S::one(), &x.t(), dy, S::one(), &mut grad.weight);
        grad.bias[0] += dy.sum();
        dy.dot(&self.weight.t())
    }
}

/// Reconstruction decoder: per-token MLP then the tile decoder. Output rows are
/// flattened tiles in patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconHead<S> {
    pub mlp: ProjectionMlp<S>,
    pub deconv: TileDecoder<S>,
}

impl_parameters!(ReconHead { mlp, deconv });

pub struct ReconCache<S> {
    mlp: MlpCache<S>,
    z: Array2<S>,
}

impl<S: Scalar> ReconHead<S> {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, bottleneck: usize, patch: usize, rng: &mut R) -> Self {
        ReconHead {
            mlp: ProjectionMlp::init(dim, hidden, bottleneck, rng),
            deconv: TileDecoder {
                weight: trunc_normal((bottleneck, patch * patch), 0.02, rng),
                bias: Array1::zeros(1),
            },
        }
    }

    pub fn forward(&self, tokens: &Array2<S>) -> (Array2<S>, ReconCache<S>) {
        let (z, mlp) = self.mlp.forward(tokens);
        let tiles = self.deconv.forward(&z);
        (tiles, ReconCache { mlp, z })
    }

    pub fn backward(&self, c: &ReconCache<S>, dtiles: &Array2<S>, grad: &mut ReconHead<S>) -> Array2<S> {
        let dz = self.deconv.backward(&c.z, dtiles, &mut grad.deconv);
        self.mlp.backward(&c.mlp, &dz, &mut grad.mlp)
    }
}

/// Classifier whose rows are kept at unit norm: `w_k = v_k / |v_k|`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNormLinear<S> {
    /// `classes x bottleneck` direction parameters.
    pub v: Array2<S>,
}

impl_parameters!(WeightNormLinear { v });

impl<S: Scalar> WeightNormLinear<S> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, classes: usize, rng: &mut R) -> Self {
        let mut v = Array2::from_shape_simple_fn((classes, d_in), || {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z)
        });
        for mut row in v.rows_mut() {
            let n = row.iter().map(|&x| x * x).sum::<S>().sqrt();
            row /= n;
        }
        WeightNormLinear { v }
    }

    pub fn norms(&self) -> Array1<S> {
        self.v.map_axis(Axis(1), |r| r.iter().map(|&x| x * x).sum::<S>().sqrt())
    }

    /// Effective unit-norm weight matrix.
    pub fn weight(&self) -> Array2<S> {
        let norms = self.norms();
        let mut w = self.v.clone();
        Zip::from(w.rows_mut()).and(&norms).for_each(|mut r, &n| r /= n);
        w
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, Array2<S>) {
        let w = self.weight();
        (x.dot(&w.t()), w)
    }

    pub fn backward(&self, x: &Array2<S>, w: &Array2<S>, dy: &Array2<S>, grad: &mut WeightNormLinear<S>) -> Array2<S> {
        let dw = dy.t().dot(x);
        let norms = self.norms();
        Zip::from(grad.v.rows_mut())
            .and(dw.rows())
            .and(w.rows())
            .and(&norms)
            .for_each(|mut g, dwr, wr, &n| {
                let proj: S = dwr.iter().zip(wr.iter()).map(|(&a, &b)| a * b).sum();
                Zip::from(&mut g).and(&dwr).and(&wr).for_each(|gi, &d, &wi| {
                    *gi += (d - wi * proj) / n;
                });
            });
        dy.dot(w)
    }
}

/// `x / max(|x|, eps)` per row, with the norms used.
pub fn l2_normalize_rows<S: Scalar>(x: &Array2<S>) -> (Array2<S>, Array1<S>) {
    let eps = S::lit(L2_EPS);
    let norms = x.map_axis(Axis(1), |r| r.iter().map(|&v| v * v).sum::<S>().sqrt().max(eps));
    let mut y = x.clone();
    Zip::from(y.rows_mut()).and(&norms).for_each(|mut r, &n| r /= n);
    (y, norms)
}

pub fn l2_normalize_backward<S: Scalar>(y: &Array2<S>, norms: &Array1<S>, dy: &Array2<S>) -> Array2<S> {
    let eps = S::lit(L2_EPS);
    let mut dx = dy.clone();
    Zip::from(dx.rows_mut())
        .and(y.rows())
        .and(norms)
        .for_each(|mut d, yr, &n| {
            if n > eps {
                let dot: S = d.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum();
                Zip::from(&mut d).and(&yr).for_each(|di, &yi| *di = (*di - yi * dot) / n);
            } else {
                d /= n;
            }
        });
    dx
}

/// MLP, l2 normalization, weight-normalized classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<S> {
    pub mlp: ProjectionMlp<S>,
    pub last: WeightNormLinear<S>,
}

impl_parameters!(ClassifierHead { mlp, last });

pub struct ClassifierCache<S> {
    mlp: MlpCache<S>,
    zn: Array2<S>,
    norms: Array1<S>,
    w: Array2<S>,
}

impl<S: Scalar> ClassifierHead<S> {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, bottleneck: usize, classes: usize, rng: &mut R) -> Self {
        ClassifierHead {
            mlp: ProjectionMlp::init(dim, hidden, bottleneck, rng),
            last: WeightNormLinear::init(bottleneck, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.last.v.nrows()
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, ClassifierCache<S>) {
        let (z, mlp) = self.mlp.forward(x);
        let (zn, norms) = l2_normalize_rows(&z);
        let (logits, w) = self.last.forward(&zn);
        (logits, ClassifierCache { mlp, zn, norms, w })
    }

    /// Logits from an already computed bottleneck vector (post-MLP).
    pub fn logits_from_bottleneck(&self, z: &Array2<S>) -> Array2<S> {
        let (zn, _) = l2_normalize_rows(z);
        self.last.forward(&zn).0
    }

    pub fn backward(&self, c: &ClassifierCache<S>, dlogits: &Array2<S>, grad: &mut ClassifierHead<S>) -> Array2<S> {
        let dzn = self.last.backward(&c.zn, &c.w, dlogits, &mut grad.last);
        let dz = l2_normalize_backward(&c.zn, &c.norms, &dzn);
        self.mlp.backward(&c.mlp, &dz, &mut grad.mlp)
    }
}
