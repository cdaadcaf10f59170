use rand::Rng;

use crate::error::{NnError, Result};
use crate::init::glorot_uniform;
use crate::linalg::{add_column_sums, gemm, MatMut, MatRef, Real};
use crate::tensor::{Parameters, Tensor};

/// Gated recurrent unit returning the full hidden sequence.
///
/// Gate layout along the `3 * hidden` axis is `[update, reset, candidate]`.
/// The reset gate is applied after the recurrent projection:
///
/// ```text
/// z  = sigmoid(x Wz + bz + h Uz + cz)
/// r  = sigmoid(x Wr + br + h Ur + cr)
/// n  = tanh(x Wn + bn + r * (h Un + cn))
/// h' = z * h + (1 - z) * n
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<T> {
    /// `[input, 3 * hidden]`
    pub w_input: Tensor<T>,
    /// `[hidden, 3 * hidden]`
    pub w_hidden: Tensor<T>,
    /// `[3 * hidden]`
    pub b_input: Tensor<T>,
    /// `[3 * hidden]`
    pub b_hidden: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    input: Tensor<T>,
    output: Tensor<T>,
    // per step gate values, each [batch, len, hidden]
    z: Vec<T>,
    r: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
}

impl<T: Real> Gru<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_input: glorot_uniform(&[input, 3 * hidden], input, 3 * hidden, rng),
            w_hidden: glorot_uniform(&[hidden, 3 * hidden], hidden, 3 * hidden, rng),
            b_input: Tensor::zeros(&[3 * hidden]),
            b_hidden: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_input.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_input: self.w_input.zeros_like(),
            w_hidden: self.w_hidden.zeros_like(),
            b_input: self.b_input.zeros_like(),
            b_hidden: self.b_hidden.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> Gru<U> {
        Gru {
            w_input: self.w_input.cast(),
            w_hidden: self.w_hidden.cast(),
            b_input: self.b_input.cast(),
            b_hidden: self.b_hidden.cast(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GruCache<T>)> {
        let d = self.input_size();
        let h = self.hidden_size();
        let (batch, len) = match *x.shape() {
            [b, l, c] if c == d => (b, l),
            _ => {
                return Err(NnError::ShapeMismatch {
                    context: "gru input",
                    expected: vec![x.shape().first().copied().unwrap_or(0), 0, d],
                    got: x.shape().to_vec(),
                })
            }
        };
        let g3 = 3 * h;
        // input projections for all steps at once
        let mut xw = vec![T::zero(); batch * len * g3];
        for row in xw.chunks_mut(g3) {
            row.copy_from_slice(self.b_input.data());
        }
        gemm(
            MatRef::new(x.data(), batch * len, d),
            MatRef::new(self.w_input.data(), d, g3),
            T::one(),
            MatMut::new(&mut xw, batch * len, g3),
        );

        let cells = batch * len * h;
        let mut out = vec![T::zero(); cells];
        let (mut zs, mut rs, mut ns, mut hns) =
            (vec![T::zero(); cells], vec![T::zero(); cells], vec![T::zero(); cells], vec![T::zero(); cells]);
        let mut hw = vec![T::zero(); batch * g3];
        let one = T::one();
        for t in 0..len {
            for row in hw.chunks_mut(g3) {
                row.copy_from_slice(self.b_hidden.data());
            }
            if t > 0 {
                gemm(
                    MatRef::strided(&out[(t - 1) * h..], batch, h, len * h),
                    MatRef::new(self.w_hidden.data(), h, g3),
                    one,
                    MatMut::new(&mut hw, batch, g3),
                );
            }
            for b in 0..batch {
                let xr = &xw[(b * len + t) * g3..(b * len + t + 1) * g3];
                let hr = &hw[b * g3..(b + 1) * g3];
                let base = (b * len + t) * h;
                for j in 0..h {
                    let z = (xr[j] + hr[j]).sigmoid();
                    let r = (xr[h + j] + hr[h + j]).sigmoid();
                    let hn = hr[2 * h + j];
                    let n = (xr[2 * h + j] + r * hn).tanh();
                    let prev = if t > 0 { out[base - h + j] } else { T::zero() };
                    out[base + j] = z * prev + (one - z) * n;
                    zs[base + j] = z;
                    rs[base + j] = r;
                    ns[base + j] = n;
                    hns[base + j] = hn;
                }
            }
        }
        let output = Tensor::from_vec(&[batch, len, h], out)?;
        let cache = GruCache { input: x.clone(), output: output.clone(), z: zs, r: rs, n: ns, hn: hns };
        Ok((output, cache))
    }

    /// Backpropagation through time over the whole sequence.
    pub fn backward(&self, cache: &GruCache<T>, d_out: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        d_out.expect_shape("gru output gradient", cache.output.shape())?;
        let d = self.input_size();
        let h = self.hidden_size();
        let (batch, len) = (cache.output.shape()[0], cache.output.shape()[1]);
        let g3 = 3 * h;
        let one = T::one();
        let out = cache.output.data();
        let dout = d_out.data();

        let mut grads = self.zeros_like();
        let mut dxw = vec![T::zero(); batch * len * g3];
        let mut dhw = vec![T::zero(); batch * g3];
        let mut carry = vec![T::zero(); batch * h];
        for t in (0..len).rev() {
            for b in 0..batch {
                let base = (b * len + t) * h;
                let dx_row = &mut dxw[(b * len + t) * g3..(b * len + t + 1) * g3];
                let dh_row = &mut dhw[b * g3..(b + 1) * g3];
                for j in 0..h {
                    let dh = dout[base + j] + carry[b * h + j];
                    let (z, r, n, hn) = (cache.z[base + j], cache.r[base + j], cache.n[base + j], cache.hn[base + j]);
                    let prev = if t > 0 { out[base - h + j] } else { T::zero() };
                    let dz = dh * (prev - n);
                    let dn = dh * (one - z);
                    let da_n = dn * (one - n * n);
                    let da_z = dz * z * (one - z);
                    let da_r = da_n * hn * r * (one - r);
                    dx_row[j] = da_z;
                    dx_row[h + j] = da_r;
                    dx_row[2 * h + j] = da_n;
                    dh_row[j] = da_z;
                    dh_row[h + j] = da_r;
                    dh_row[2 * h + j] = da_n * r;
                    carry[b * h + j] = dh * z;
                }
            }
            add_column_sums(&dhw, batch, g3, grads.b_hidden.data_mut());
            if t > 0 {
                let prev = MatRef::strided(&out[(t - 1) * h..], batch, h, len * h);
                gemm(prev.t(), MatRef::new(&dhw, batch, g3), one, MatMut::new(grads.w_hidden.data_mut(), h, g3));
                gemm(
                    MatRef::new(&dhw, batch, g3),
                    MatRef::new(self.w_hidden.data(), h, g3).t(),
                    one,
                    MatMut::new(&mut carry, batch, h),
                );
            }
        }
        let rows = batch * len;
        gemm(
            MatRef::new(cache.input.data(), rows, d).t(),
            MatRef::new(&dxw, rows, g3),
            T::zero(),
            MatMut::new(grads.w_input.data_mut(), d, g3),
        );
        add_column_sums(&dxw, rows, g3, grads.b_input.data_mut());
        let mut dx = Tensor::zeros(&[batch, len, d]);
        gemm(
            MatRef::new(&dxw, rows, g3),
            MatRef::new(self.w_input.data(), d, g3).t(),
            T::zero(),
            MatMut::new(dx.data_mut(), rows, d),
        );
        Ok((dx, grads))
    }
}

impl<T: Real> Parameters<T> for Gru<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w_input".into(), &self.w_input),
            ("w_hidden".into(), &self.w_hidden),
            ("b_input".into(), &self.b_input),
            ("b_hidden".into(), &self.b_hidden),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("w_input".into(), &mut self.w_input),
            ("w_hidden".into(), &mut self.w_hidden),
            ("b_input".into(), &mut self.b_input),
            ("b_hidden".into(), &mut self.b_hidden),
        ]
    }
}
