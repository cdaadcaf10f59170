use rand::Rng;

use crate::activation::Activation;
use crate::error::{NnError, Result};
use crate::init::glorot_uniform;
use crate::linalg::{add_column_sums, gemm, MatMut, MatRef, Real};
use crate::tensor::{Parameters, Tensor};

/// Affine map `y = act(x W + b)` over a `[batch, in]` input.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    input: Tensor<T>,
    output: Tensor<T>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(&[d_in, d_out], d_in, d_out, rng),
            bias: Tensor::zeros(&[d_out]),
            activation,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: self.weight.zeros_like(), bias: self.bias.zeros_like(), activation: self.activation }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseCache<T>)> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        if x.shape().len() != 2 || x.shape()[1] != d_in {
            return Err(NnError::ShapeMismatch {
                context: "dense input",
                expected: vec![x.shape().first().copied().unwrap_or(0), d_in],
                got: x.shape().to_vec(),
            });
        }
        let batch = x.shape()[0];
        let mut y = Tensor::zeros(&[batch, d_out]);
        {
            let out = y.data_mut();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(self.bias.data());
            }
            gemm(
                MatRef::new(x.data(), batch, d_in),
                MatRef::new(self.weight.data(), d_in, d_out),
                T::one(),
                MatMut::new(out, batch, d_out),
            );
            if self.activation != Activation::Identity {
                for v in out.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
        }
        let cache = DenseCache { input: x.clone(), output: y.clone() };
        Ok((y, cache))
    }

    /// Returns `(d_input, parameter gradients)`.
    pub fn backward(&self, cache: &DenseCache<T>, d_out: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        d_out.expect_shape("dense output gradient", cache.output.shape())?;
        let (d_in, n_out) = (self.d_in(), self.d_out());
        let batch = cache.input.shape()[0];
        let mut d_pre = d_out.clone();
        if self.activation != Activation::Identity {
            for (g, &y) in d_pre.data_mut().iter_mut().zip(cache.output.data()) {
                *g *= self.activation.derivative_from_output(y);
            }
        }
        let mut grads = self.zeros_like();
        gemm(
            MatRef::new(cache.input.data(), batch, d_in).t(),
            MatRef::new(d_pre.data(), batch, n_out),
            T::zero(),
            MatMut::new(grads.weight.data_mut(), d_in, n_out),
        );
        add_column_sums(d_pre.data(), batch, n_out, grads.bias.data_mut());
        let mut dx = Tensor::zeros(&[batch, d_in]);
        gemm(
            MatRef::new(d_pre.data(), batch, n_out),
            MatRef::new(self.weight.data(), d_in, n_out).t(),
            T::zero(),
            MatMut::new(dx.data_mut(), batch, d_in),
        );
        Ok((dx, grads))
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense { weight: self.weight.cast(), bias: self.bias.cast(), activation: self.activation }
    }
}

impl<T: Real> Parameters<T> for Dense<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}
