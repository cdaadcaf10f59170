use rand::Rng;

use crate::activation::Activation;
use crate::error::{NnError, Result};
use crate::init::glorot_uniform;
use crate::linalg::{add_column_sums, gemm, MatMut, MatRef, Real};
use crate::tensor::{Parameters, Tensor};

/// One-dimensional convolution, stride 1, zero "same" padding.
///
/// Input `[batch, length, in_channels]`, output `[batch, length, filters]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    /// `[kernel, in_channels, filters]`
    pub weight: Tensor<T>,
    /// `[filters]`
    pub bias: Tensor<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct Conv1dCache<T> {
    cols: Vec<T>,
    output: Tensor<T>,
    input_shape: [usize; 3],
}

impl<T: Real> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(
        kernel: usize,
        in_channels: usize,
        filters: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: glorot_uniform(
                &[kernel, in_channels, filters],
                kernel * in_channels,
                kernel * filters,
                rng,
            ),
            bias: Tensor::zeros(&[filters]),
            activation,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: self.weight.zeros_like(), bias: self.bias.zeros_like(), activation: self.activation }
    }

    fn pad_left(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    fn input_dims(&self, x: &Tensor<T>) -> Result<[usize; 3]> {
        match *x.shape() {
            [b, l, c] if c == self.in_channels() => Ok([b, l, c]),
            _ => Err(NnError::ShapeMismatch {
                context: "conv1d input",
                expected: vec![x.shape().first().copied().unwrap_or(0), 0, self.in_channels()],
                got: x.shape().to_vec(),
            }),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Conv1dCache<T>)> {
        let [batch, len, cin] = self.input_dims(x)?;
        let (k, f, pad) = (self.kernel(), self.filters(), self.pad_left());
        let width = k * cin;
        let mut cols = vec![T::zero(); batch * len * width];
        let xd = x.data();
        for b in 0..batch {
            for l in 0..len {
                let row = &mut cols[(b * len + l) * width..(b * len + l + 1) * width];
                for j in 0..k {
                    let src = l as isize + j as isize - pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let s = (b * len + src as usize) * cin;
                    row[j * cin..(j + 1) * cin].copy_from_slice(&xd[s..s + cin]);
                }
            }
        }
        let rows = batch * len;
        let mut y = Tensor::zeros(&[batch, len, f]);
        {
            let out = y.data_mut();
            for r in out.chunks_mut(f) {
                r.copy_from_slice(self.bias.data());
            }
            gemm(
                MatRef::new(&cols, rows, width),
                MatRef::new(self.weight.data(), width, f),
                T::one(),
                MatMut::new(out, rows, f),
            );
            if self.activation != Activation::Identity {
                for v in out.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
        }
        let cache = Conv1dCache { cols, output: y.clone(), input_shape: [batch, len, cin] };
        Ok((y, cache))
    }

    pub fn backward(&self, cache: &Conv1dCache<T>, d_out: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        d_out.expect_shape("conv1d output gradient", cache.output.shape())?;
        let [batch, len, cin] = cache.input_shape;
        let (k, f, pad) = (self.kernel(), self.filters(), self.pad_left());
        let width = k * cin;
        let rows = batch * len;
        let mut d_pre = d_out.clone();
        if self.activation != Activation::Identity {
            for (g, &y) in d_pre.data_mut().iter_mut().zip(cache.output.data()) {
                *g *= self.activation.derivative_from_output(y);
            }
        }
        let mut grads = self.zeros_like();
        gemm(
            MatRef::new(&cache.cols, rows, width).t(),
            MatRef::new(d_pre.data(), rows, f),
            T::zero(),
            MatMut::new(grads.weight.data_mut(), width, f),
        );
        add_column_sums(d_pre.data(), rows, f, grads.bias.data_mut());
        let mut d_cols = vec![T::zero(); rows * width];
        gemm(
            MatRef::new(d_pre.data(), rows, f),
            MatRef::new(self.weight.data(), width, f).t(),
            T::zero(),
            MatMut::new(&mut d_cols, rows, width),
        );
        let mut dx = Tensor::zeros(&[batch, len, cin]);
        let dxd = dx.data_mut();
        for b in 0..batch {
            for l in 0..len {
                let row = &d_cols[(b * len + l) * width..(b * len + l + 1) * width];
                for j in 0..k {
                    let dst = l as isize + j as isize - pad as isize;
                    if dst < 0 || dst >= len as isize {
                        continue;
                    }
                    let d = (b * len + dst as usize) * cin;
                    for (o, &g) in dxd[d..d + cin].iter_mut().zip(&row[j * cin..(j + 1) * cin]) {
                        *o += g;
                    }
                }
            }
        }
        Ok((dx, grads))
    }

    pub fn cast<U: Real>(&self) -> Conv1d<U> {
        Conv1d { weight: self.weight.cast(), bias: self.bias.cast(), activation: self.activation }
    }
}

impl<T: Real> Parameters<T> for Conv1d<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;

    #[test]
    fn same_padding_preserves_length() {
        let conv = Conv1d::<f32>::new(5, 16, 128, Activation::Relu, &mut seeded_rng(0));
        let (y, _) = conv.forward(&Tensor::full(&[1, 128, 16], 0.5)).unwrap();
        assert_eq!(y.shape(), &[1, 128, 128]);
    }

    #[test]
    fn pointwise_identity_embedding() {
        let mut conv = Conv1d::<f64>::new(1, 16, 128, Activation::Relu, &mut seeded_rng(0));
        conv.weight = Tensor::zeros(&[1, 16, 128]);
        for c in 0..16 {
            conv.weight.data_mut()[c * 128 + c] = 1.0;
        }
        let x = Tensor::from_vec(&[1, 128, 16], (0..2048).map(|i| (i % 97) as f64 / 96.0).collect()).unwrap();
        let (y, _) = conv.forward(&x).unwrap();
        for l in 0..128 {
            for c in 0..16 {
                assert_eq!(y.data()[l * 128 + c], x.data()[l * 16 + c]);
            }
            assert!(y.data()[l * 128 + 16..(l + 1) * 128].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let conv = Conv1d::<f32>::new(3, 16, 8, Activation::Relu, &mut seeded_rng(0));
        assert!(matches!(conv.forward(&Tensor::zeros(&[1, 128, 15])), Err(NnError::ShapeMismatch { .. })));
    }
}
