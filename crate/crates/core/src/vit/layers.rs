use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::impl_parameters;
use crate::scalar::Scalar;

/// Truncated normal (cut at two standard deviations).
pub fn trunc_normal<S: Scalar, R: Rng + ?Sized>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<S> {
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break S::lit(z * std);
        }
    })
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl_parameters!(Linear { weight, bias });

impl<S: Scalar> Linear<S> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: trunc_normal((d_in, d_out), 0.02, rng),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<S>, dy: &Array2<S>, grad: &mut Linear<S>) -> Array2<S> {
        general_mat_mul(S::one(), &x.t(), dy, S::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
}

impl_parameters!(LayerNorm { gamma, beta });

pub struct LayerNormCache<S> {
    xhat: Array2<S>,
    rstd: Array1<S>,
}

pub const LN_EPS: f64 = 1e-6;

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, LayerNormCache<S>) {
        let d = S::from_usize(x.ncols()).unwrap();
        let eps = S::lit(LN_EPS);
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        Zip::from(xhat.rows_mut()).and(&mut rstd).for_each(|mut row, r| {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|&v| v * v).sum::<S>() / d;
            *r = S::one() / (var + eps).sqrt();
            row *= *r;
        });
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<S>, dy: &Array2<S>, grad: &mut LayerNorm<S>) -> Array2<S> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = S::from_usize(dy.ncols()).unwrap();
        let mut dx = dy * &self.gamma;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&cache.rstd)
            .for_each(|mut g, xh, &r| {
                let mean_g = g.sum() / d;
                let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<S>() / d;
                Zip::from(&mut g).and(&xh).for_each(|gi, &xi| {
                    *gi = r * (*gi - mean_g - xi * mean_gx);
                });
            });
        dx
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    let half = S::lit(0.5);
    let inv_sqrt2 = S::lit(std::f64::consts::FRAC_1_SQRT_2);
    x.mapv(|v| half * v * (S::one() + (v * inv_sqrt2).verf()))
}

/// `dL/dx` of GELU given the pre-activation `x`.
pub fn gelu_backward<S: Scalar>(x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let half = S::lit(0.5);
    let inv_sqrt2 = S::lit(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = S::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let cdf = half * (S::one() + (v * inv_sqrt2).verf());
        let pdf = inv_sqrt_2pi * (-half * v * v).vexp();
        *g *= cdf + v * pdf;
    });
    dx
}

/// Max and sum with eight independent accumulators so the loops vectorize.
fn lane_max<S: Scalar>(xs: &[S]) -> S {
    let mut acc = [S::neg_infinity(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] = if c[k] > acc[k] { c[k] } else { acc[k] };
        }
    }
    tail.iter().chain(acc.iter()).fold(S::neg_infinity(), |m, &v| if v > m { v } else { m })
}

fn lane_sum<S: Scalar>(xs: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k];
        }
    }
    tail.iter().chain(acc.iter()).fold(S::zero(), |a, &v| a + v)
}

fn softmax_slice<S: Scalar>(row: &mut [S]) {
    let max = lane_max(row);
    for v in row.iter_mut() {
        *v = (*v - max).vexp();
    }
    let inv = S::one() / lane_sum(row);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &mut Array2<S>) {
    for mut row in x.rows_mut() {
        match row.as_slice_mut() {
            Some(sl) => softmax_slice(sl),
            None => {
                let mut tmp = row.to_vec();
                softmax_slice(&mut tmp);
                row.assign(&Array1::from(tmp));
            }
        }
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let lse = row.iter().map(|&v| (v - max).vexp()).sum::<S>().ln() + max;
        row -= lse;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    fn fd_check(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((num - a).abs() <= 1e-6 * (1.0 + a.abs()), "idx {idx}: {num} vs {a}");
        }
    }

    #[test]
    fn layernorm_input_gradient() {
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gamma = Array1::from(vec![1.0, 0.5, -0.3, 2.0, 1.1]);
        ln.beta = Array1::from(vec![0.1, 0.0, 0.2, -0.1, 0.3]);
        let x = rand_mat(3, 5, 1);
        let w = rand_mat(3, 5, 2);
        let loss = |x: &Array2<f64>| (&ln.forward(x).0 * &w).sum();
        let (_, cache) = ln.forward(&x);
        let mut g = LayerNorm::new(5);
        g.gamma.fill(0.0);
        let dx = ln.backward(&cache, &w, &mut g);
        fd_check(loss, &x, &dx);
    }

    #[test]
    fn gelu_gradient_and_values() {
        let x = rand_mat(4, 4, 3) * 3.0;
        let w = rand_mat(4, 4, 4);
        let dx = gelu_backward(&x, &w);
        fd_check(|x| (&gelu(x) * &w).sum(), &x, &dx);
        let z = Array2::from_elem((1, 1), 1.0f64);
        assert!((gelu(&z)[[0, 0]] - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = seeded(0);
        let lin = Linear::<f64>::init(4, 3, &mut rng);
        let x = rand_mat(5, 4, 9);
        let w = rand_mat(5, 3, 10);
        let mut g = Linear::zeros(4, 3);
        let dx = lin.backward(&x, &w, &mut g);
        fd_check(|x| (&lin.forward(x) * &w).sum(), &x, &dx);
        assert_eq!(g.weight, x.t().dot(&w));
    }

    #[test]
    fn softmax_is_stable() {
        let mut x = Array2::from_shape_vec((1, 3), vec![1000.0f64, 1000.0, 1000.0]).unwrap();
        softmax_rows(&mut x);
        for v in x.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let l = log_softmax_rows(&Array2::from_shape_vec((1, 2), vec![1.0f64, 0.0]).unwrap());
        assert!((l[[0, 0]].exp() - std::f64::consts::E / (std::f64::consts::E + 1.0)).abs() < 1e-12);
    }
}
