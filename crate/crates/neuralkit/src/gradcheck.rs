//! Central finite-difference verification of hand-written backward passes.

use rand::seq::index::sample;
use rand::Rng;

use crate::conv::Conv1d;
use crate::dense::Dense;
use crate::gru::Gru;
use crate::init::seeded_rng;
use crate::lstm::Lstm;
use crate::pool::{global_max_pool, global_max_pool_backward};
use crate::tensor::{Parameters, Tensor};

/// A differentiable map checked in 64-bit arithmetic.
pub trait Checkable {
    fn output(&self, x: &Tensor<f64>) -> Tensor<f64>;
    /// Input gradient, then parameter gradients in `parameters_mut` order.
    fn gradients(&self, x: &Tensor<f64>, d_out: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>);
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(tensor index, flat index)`; tensor 0 is the input.
    pub worst: Option<(usize, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every coordinate of small tensors and a seeded sample of at least
/// `samples` coordinates overall.
pub fn grad_check<L: Checkable>(layer: &mut L, input: &Tensor<f64>, eps: f64, samples: usize) -> GradCheckReport {
    grad_check_seeded(layer, input, eps, samples, 0x5eed)
}

pub fn grad_check_seeded<L: Checkable>(
    layer: &mut L,
    input: &Tensor<f64>,
    eps: f64,
    samples: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = seeded_rng(seed);
    let probe_shape = layer.output(input).shape().to_vec();
    // random projection turns the layer output into a scalar loss
    let n_out: usize = probe_shape.iter().product();
    let proj = Tensor::from_vec(
        &probe_shape,
        (0..n_out).map(|_| rng.gen_range(0.5..1.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect(),
    )
    .unwrap();
    let loss = |layer: &L, x: &Tensor<f64>| -> f64 {
        layer.output(x).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };

    let (dx, dparams) = layer.gradients(input, &proj);
    let mut analytic = vec![dx];
    analytic.extend(dparams);
    let sizes: Vec<usize> = analytic.iter().map(|t| t.len()).collect();
    let picks = allocate(&sizes, samples, &mut rng);

    let mut report = GradCheckReport { max_rel_error: 0.0, coordinates: 0, worst: None };
    let mut x = input.clone();
    for (tensor, coords) in picks.iter().enumerate() {
        for &i in coords {
            let numeric = if tensor == 0 {
                let orig = x.data()[i];
                x.data_mut()[i] = orig + eps;
                let up = loss(layer, &x);
                x.data_mut()[i] = orig - eps;
                let down = loss(layer, &x);
                x.data_mut()[i] = orig;
                (up - down) / (2.0 * eps)
            } else {
                let orig = layer.parameters_mut()[tensor - 1].data()[i];
                layer.parameters_mut()[tensor - 1].data_mut()[i] = orig + eps;
                let up = loss(layer, &x);
                layer.parameters_mut()[tensor - 1].data_mut()[i] = orig - eps;
                let down = loss(layer, &x);
                layer.parameters_mut()[tensor - 1].data_mut()[i] = orig;
                (up - down) / (2.0 * eps)
            };
            let err = relative_error(analytic[tensor].data()[i], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((tensor, i));
            }
        }
    }
    report
}

/// Spreads `budget` coordinates over tensors; tensors smaller than their
/// share are checked exhaustively and the remainder flows to the others.
fn allocate<R: Rng>(sizes: &[usize], budget: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    let mut quota = vec![0usize; sizes.len()];
    if total <= budget {
        quota.copy_from_slice(sizes);
    } else {
        let mut left = budget;
        let mut open: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] > 0).collect();
        while left > 0 && !open.is_empty() {
            let share = (left / open.len()).max(1);
            let mut next = Vec::new();
            for &i in &open {
                let take = share.min(sizes[i] - quota[i]).min(left);
                quota[i] += take;
                left -= take;
                if quota[i] < sizes[i] {
                    next.push(i);
                }
            }
            open = next;
        }
    }
    sizes
        .iter()
        .zip(&quota)
        .map(|(&n, &q)| if q == n { (0..n).collect() } else { sample(rng, n, q).into_vec() })
        .collect()
}

impl Checkable for Dense<f64> {
    fn output(&self, x: &Tensor<f64>) -> Tensor<f64> {
        self.forward(x).unwrap().0
    }
    fn gradients(&self, x: &Tensor<f64>, d_out: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let (_, cache) = self.forward(x).unwrap();
        let (dx, g) = self.backward(&cache, d_out).unwrap();
        (dx, vec![g.weight, g.bias])
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.params_mut().into_iter().map(|(_, t)| t).collect()
    }
}

impl Checkable for Conv1d<f64> {
    fn output(&self, x: &Tensor<f64>) -> Tensor<f64> {
        self.forward(x).unwrap().0
    }
    fn gradients(&self, x: &Tensor<f64>, d_out: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let (_, cache) = self.forward(x).unwrap();
        let (dx, g) = self.backward(&cache, d_out).unwrap();
        (dx, vec![g.weight, g.bias])
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.params_mut().into_iter().map(|(_, t)| t).collect()
    }
}

impl Checkable for Gru<f64> {
    fn output(&self, x: &Tensor<f64>) -> Tensor<f64> {
        self.forward(x).unwrap().0
    }
    fn gradients(&self, x: &Tensor<f64>, d_out: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let (_, cache) = self.forward(x).unwrap();
        let (dx, g) = self.backward(&cache, d_out).unwrap();
        (dx, vec![g.w_input, g.w_hidden, g.b_input, g.b_hidden])
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.params_mut().into_iter().map(|(_, t)| t).collect()
    }
}

impl Checkable for Lstm<f64> {
    fn output(&self, x: &Tensor<f64>) -> Tensor<f64> {
        self.forward(x).unwrap().0
    }
    fn gradients(&self, x: &Tensor<f64>, d_out: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let (_, cache) = self.forward(x).unwrap();
        let (dx, g) = self.backward(&cache, d_out).unwrap();
        (dx, vec![g.w_input, g.w_hidden, g.bias])
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.params_mut().into_iter().map(|(_, t)| t).collect()
    }
}

/// Parameter-free global max pooling as a checkable map.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPoolProbe;

impl Checkable for MaxPoolProbe {
    fn output(&self, x: &Tensor<f64>) -> Tensor<f64> {
        global_max_pool(x).unwrap().0
    }
    fn gradients(&self, x: &Tensor<f64>, d_out: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let (_, cache) = global_max_pool(x).unwrap();
        (global_max_pool_backward(&cache, d_out).unwrap(), vec![])
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = seeded_rng(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_layer_is_exact() {
        let mut layer = Dense::<f64>::new(6, 4, Activation::Identity, &mut seeded_rng(1));
        let report = grad_check(&mut layer, &random_input(&[3, 6], 2), 1e-4, 500);
        assert_eq!(report.coordinates, 18 + 24 + 4);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    /// Doubling the weight gradient is caught: |g - 2g| / max(|g|, |2g|) = 1/2.
    #[test]
    fn detects_corrupted_backward() {
        struct Doubled(Dense<f64>);
        impl Checkable for Doubled {
            fn output(&self, x: &Tensor<f64>) -> Tensor<f64> {
                self.0.output(x)
            }
            fn gradients(&self, x: &Tensor<f64>, d: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
                let (dx, mut g) = self.0.gradients(x, d);
                g[0].scale(2.0);
                (dx, g)
            }
            fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
                self.0.parameters_mut()
            }
        }
        let mut layer = Doubled(Dense::new(5, 3, Activation::Identity, &mut seeded_rng(3)));
        let report = grad_check(&mut layer, &random_input(&[4, 5], 4), 1e-4, 500);
        assert!((report.max_rel_error - 0.5).abs() < 1e-6, "{report:?}");
        assert_eq!(report.worst.unwrap().0, 1);
    }

    #[test]
    fn budget_split_covers_small_tensors() {
        let picks = allocate(&[1000, 3, 50], 200, &mut seeded_rng(0));
        assert_eq!(picks[1].len(), 3);
        assert_eq!(picks.iter().map(Vec::len).sum::<usize>(), 200);
        let mut p0 = picks[0].clone();
        p0.sort_unstable();
        p0.dedup();
        assert_eq!(p0.len(), picks[0].len());
    }
}
