use rand::Rng;

use crate::linalg::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` during
/// training so inference is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    rate: f64,
}

/// Per-unit multipliers (0 or `1 / (1 - rate)`); `None` when inactive.
#[derive(Debug, Clone)]
pub struct DropoutMask<T>(Option<Vec<T>>);

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Self { rate }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> (Tensor<T>, DropoutMask<T>) {
        if mode == Mode::Infer || self.rate == 0.0 {
            return (x.clone(), DropoutMask(None));
        }
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        let mut y = x.clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        (y, DropoutMask(Some(mask)))
    }

    pub fn backward<T: Real>(&self, mask: &DropoutMask<T>, d_out: &Tensor<T>) -> Tensor<T> {
        match &mask.0 {
            None => d_out.clone(),
            Some(m) => {
                let mut d = d_out.clone();
                for (v, &k) in d.data_mut().iter_mut().zip(m) {
                    *v *= k;
                }
                d
            }
        }
    }
}
