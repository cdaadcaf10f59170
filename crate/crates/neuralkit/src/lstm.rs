use rand::Rng;

use crate::error::{NnError, Result};
use crate::init::glorot_uniform;
use crate::linalg::{add_column_sums, gemm, MatMut, MatRef, Real};
use crate::tensor::{Parameters, Tensor};

/// Long short-term memory layer returning the full hidden sequence.
///
/// Gate layout along the `4 * hidden` axis is `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T> {
    /// `[input, 4 * hidden]`
    pub w_input: Tensor<T>,
    /// `[hidden, 4 * hidden]`
    pub w_hidden: Tensor<T>,
    /// `[4 * hidden]`
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    input: Tensor<T>,
    output: Tensor<T>,
    // [batch, len, 4 * hidden] activated gates
    gates: Vec<T>,
    // [batch, len, hidden]
    cell: Vec<T>,
    cell_tanh: Vec<T>,
}

impl<T: Real> Lstm<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_input: glorot_uniform(&[input, 4 * hidden], input, 4 * hidden, rng),
            w_hidden: glorot_uniform(&[hidden, 4 * hidden], hidden, 4 * hidden, rng),
            bias: Tensor::zeros(&[4 * hidden]),
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
            bias: self.bias.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> Lstm<U> {
        Lstm { w_input: self.w_input.cast(), w_hidden: self.w_hidden.cast(), bias: self.bias.cast() }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LstmCache<T>)> {
        let d = self.input_size();
        let h = self.hidden_size();
        let (batch, len) = match *x.shape() {
            [b, l, c] if c == d => (b, l),
            _ => {
                return Err(NnError::ShapeMismatch {
                    context: "lstm input",
                    expected: vec![x.shape().first().copied().unwrap_or(0), 0, d],
                    got: x.shape().to_vec(),
                })
            }
        };
        let g4 = 4 * h;
        let mut gates = vec![T::zero(); batch * len * g4];
        for row in gates.chunks_mut(g4) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(
            MatRef::new(x.data(), batch * len, d),
            MatRef::new(self.w_input.data(), d, g4),
            T::one(),
            MatMut::new(&mut gates, batch * len, g4),
        );
        let cells = batch * len * h;
        let mut out = vec![T::zero(); cells];
        let mut cell = vec![T::zero(); cells];
        let mut cell_tanh = vec![T::zero(); cells];
        for t in 0..len {
            if t > 0 {
                // gates[:, t, :] += h[:, t-1, :] W_hidden
                gemm(
                    MatRef::strided(&out[(t - 1) * h..], batch, h, len * h),
                    MatRef::new(self.w_hidden.data(), h, g4),
                    T::one(),
                    MatMut::strided(&mut gates[t * g4..], batch, g4, len * g4),
                );
            }
            for b in 0..batch {
                let g = &mut gates[(b * len + t) * g4..(b * len + t + 1) * g4];
                let base = (b * len + t) * h;
                for j in 0..h {
                    let i = g[j].sigmoid();
                    let f = g[h + j].sigmoid();
                    let c_hat = g[2 * h + j].tanh();
                    let o = g[3 * h + j].sigmoid();
                    g[j] = i;
                    g[h + j] = f;
                    g[2 * h + j] = c_hat;
                    g[3 * h + j] = o;
                    let prev_c = if t > 0 { cell[base - h + j] } else { T::zero() };
                    let c = f * prev_c + i * c_hat;
                    let tc = c.tanh();
                    cell[base + j] = c;
                    cell_tanh[base + j] = tc;
                    out[base + j] = o * tc;
                }
            }
        }
        let output = Tensor::from_vec(&[batch, len, h], out)?;
        let cache = LstmCache { input: x.clone(), output: output.clone(), gates, cell, cell_tanh };
        Ok((output, cache))
    }

    pub fn backward(&self, cache: &LstmCache<T>, d_out: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        d_out.expect_shape("lstm output gradient", cache.output.shape())?;
        let d = self.input_size();
        let h = self.hidden_size();
        let (batch, len) = (cache.output.shape()[0], cache.output.shape()[1]);
        let g4 = 4 * h;
        let one = T::one();
        let out = cache.output.data();
        let dout = d_out.data();

        let mut grads = self.zeros_like();
        let mut da = vec![T::zero(); batch * len * g4];
        let mut carry_h = vec![T::zero(); batch * h];
        let mut carry_c = vec![T::zero(); batch * h];
        for t in (0..len).rev() {
            for b in 0..batch {
                let base = (b * len + t) * h;
                let g = &cache.gates[(b * len + t) * g4..(b * len + t + 1) * g4];
                let dg = &mut da[(b * len + t) * g4..(b * len + t + 1) * g4];
                for j in 0..h {
                    let (i, f, c_hat, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let tc = cache.cell_tanh[base + j];
                    let prev_c = if t > 0 { cache.cell[base - h + j] } else { T::zero() };
                    let dh = dout[base + j] + carry_h[b * h + j];
                    let dc = carry_c[b * h + j] + dh * o * (one - tc * tc);
                    dg[j] = dc * c_hat * i * (one - i);
                    dg[h + j] = dc * prev_c * f * (one - f);
                    dg[2 * h + j] = dc * i * (one - c_hat * c_hat);
                    dg[3 * h + j] = dh * tc * o * (one - o);
                    carry_c[b * h + j] = dc * f;
                }
            }
            if t > 0 {
                let step = MatRef::strided(&da[t * g4..], batch, g4, len * g4);
                let prev = MatRef::strided(&out[(t - 1) * h..], batch, h, len * h);
                gemm(prev.t(), step, one, MatMut::new(grads.w_hidden.data_mut(), h, g4));
                gemm(
                    step,
                    MatRef::new(self.w_hidden.data(), h, g4).t(),
                    T::zero(),
                    MatMut::new(&mut carry_h, batch, h),
                );
            }
        }
        let rows = batch * len;
        gemm(
            MatRef::new(cache.input.data(), rows, d).t(),
            MatRef::new(&da, rows, g4),
            T::zero(),
            MatMut::new(grads.w_input.data_mut(), d, g4),
        );
        add_column_sums(&da, rows, g4, grads.bias.data_mut());
        let mut dx = Tensor::zeros(&[batch, len, d]);
        gemm(
            MatRef::new(&da, rows, g4),
            MatRef::new(self.w_input.data(), d, g4).t(),
            T::zero(),
            MatMut::new(dx.data_mut(), rows, d),
        );
        Ok((dx, grads))
    }
}

impl<T: Real> Parameters<T> for Lstm<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w_input".into(), &self.w_input),
            ("w_hidden".into(), &self.w_hidden),
            ("bias".into(), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("w_input".into(), &mut self.w_input),
            ("w_hidden".into(), &mut self.w_hidden),
            ("bias".into(), &mut self.bias),
        ]
    }
}
