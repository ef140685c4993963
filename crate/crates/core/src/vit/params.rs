//! Named traversal of model tensors.
//!
//! Gradients, Adam moments and the EMA teacher all reuse the model type
//! itself, so elementwise updates are zips over two traversals in the same
//! order.

use ndarray::{Array1, Array2};

use crate::scalar::Scalar;

pub struct ParamRef<'a, S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [S],
}

pub struct ParamMut<'a, S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [S],
}

pub(crate) fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

pub trait Parameters<S: Scalar> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, S>>);
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, S>>);

    fn params(&self) -> Vec<ParamRef<'_, S>> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, S>> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    fn fill(&mut self, value: S) {
        for p in self.params_mut() {
            p.data.fill(value);
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(S::zero());
        z
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// `self += other` elementwise.
    fn add_assign_params(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += *y;
            }
        }
    }

    fn sum_squares(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum()
    }
}

impl<S: Scalar> Parameters<S> for Array1<S> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, S>>) {
        out.push(ParamRef {
            name: prefix.to_string(),
            shape: self.shape().to_vec(),
            data: self.as_slice().expect("standard layout"),
        });
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, S>>) {
        let shape = self.shape().to_vec();
        out.push(ParamMut {
            name: prefix.to_string(),
            shape,
            data: self.as_slice_mut().expect("standard layout"),
        });
    }
}

impl<S: Scalar> Parameters<S> for Array2<S> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, S>>) {
        out.push(ParamRef {
            name: prefix.to_string(),
            shape: self.shape().to_vec(),
            data: self.as_slice().expect("standard layout"),
        });
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, S>>) {
        let shape = self.shape().to_vec();
        out.push(ParamMut {
            name: prefix.to_string(),
            shape,
            data: self.as_slice_mut().expect("standard layout"),
        });
    }
}

impl<S: Scalar, T: Parameters<S>> Parameters<S> for Vec<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, S>>) {
        for (i, t) in self.iter().enumerate() {
            t.collect_params(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, S>>) {
        for (i, t) in self.iter_mut().enumerate() {
            t.collect_params_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`Parameters`] for a struct by visiting the listed fields in order.
macro_rules! impl_parameters {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<S: $crate::scalar::Scalar> $crate::vit::params::Parameters<S> for $ty<S> {
            fn collect_params<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<$crate::vit::params::ParamRef<'a, S>>,
            ) {
                $( self.$field.collect_params(&$crate::vit::params::join(prefix, stringify!($field)), out); )*
            }

            fn collect_params_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<$crate::vit::params::ParamMut<'a, S>>,
            ) {
                $( self.$field.collect_params_mut(&$crate::vit::params::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}

pub(crate) use impl_parameters;
