use crate::error::{NnError, Result};
use crate::linalg::Real;
use crate::tensor::Tensor;

/// Argmax positions kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<usize>,
    input_shape: [usize; 3],
}

impl PoolCache {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Per-channel maximum over the sequence axis: `[batch, len, ch] -> [batch, ch]`.
///
/// Ties resolve to the first occurrence.
pub fn global_max_pool<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let [batch, len, ch] = match *x.shape() {
        [b, l, c] => [b, l, c],
        _ => {
            return Err(NnError::ShapeMismatch {
                context: "global max pool input",
                expected: vec![0, 0, 0],
                got: x.shape().to_vec(),
            })
        }
    };
    if len == 0 {
        return Err(NnError::EmptySequence);
    }
    let xd = x.data();
    let mut out = Tensor::zeros(&[batch, ch]);
    let mut argmax = vec![0usize; batch * ch];
    for b in 0..batch {
        let o = &mut out.data_mut()[b * ch..(b + 1) * ch];
        let am = &mut argmax[b * ch..(b + 1) * ch];
        o.copy_from_slice(&xd[b * len * ch..b * len * ch + ch]);
        for l in 1..len {
            let row = &xd[(b * len + l) * ch..(b * len + l + 1) * ch];
            for c in 0..ch {
                if row[c] > o[c] {
                    o[c] = row[c];
                    am[c] = l;
                }
            }
        }
    }
    Ok((out, PoolCache { argmax, input_shape: [batch, len, ch] }))
}

pub fn global_max_pool_backward<T: Real>(cache: &PoolCache, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [batch, len, ch] = cache.input_shape;
    d_out.expect_shape("global max pool output gradient", &[batch, ch])?;
    let mut dx = Tensor::zeros(&[batch, len, ch]);
    let dxd = dx.data_mut();
    for b in 0..batch {
        for c in 0..ch {
            let l = cache.argmax[b * ch + c];
            dxd[(b * len + l) * ch + c] = d_out.data()[b * ch + c];
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_sequence() {
        let (y, _) = global_max_pool(&Tensor::full(&[2, 9, 3], 0.25f64)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn tie_routes_to_first_occurrence() {
        let mut x = Tensor::<f64>::zeros(&[1, 10, 1]);
        x.data_mut()[3] = 2.0;
        x.data_mut()[7] = 2.0;
        let (y, cache) = global_max_pool(&x).unwrap();
        assert_eq!(y.data(), &[2.0]);
        let dx = global_max_pool_backward(&cache, &Tensor::full(&[1, 1], 1.0)).unwrap();
        let nonzero: Vec<usize> = dx.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nonzero, vec![3]);
    }

    #[test]
    fn one_gradient_entry_per_channel() {
        let x = Tensor::from_vec(&[1, 4, 3], (0..12).map(|i| ((i * 5) % 7) as f64).collect()).unwrap();
        let (_, cache) = global_max_pool(&x).unwrap();
        let dx = global_max_pool_backward(&cache, &Tensor::full(&[1, 3], 1.0)).unwrap();
        for c in 0..3 {
            let count = (0..4).filter(|l| dx.data()[l * 3 + c] != 0.0).count();
            assert_eq!(count, 1);
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        assert_eq!(global_max_pool(&Tensor::<f32>::zeros(&[1, 0, 4])).unwrap_err(), NnError::EmptySequence);
    }
}
