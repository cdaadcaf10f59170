//! Minimal dense-tensor kernels for the encoder and classification head.
//!
//! Every layer exposes a `forward` that returns its output together with a
//! cache, and a `backward` that consumes the cache and returns the input
//! gradient plus a parameter-gradient value of the same type as the layer.
//! All layers are generic over [`Real`] so that training runs in `f32` while
//! gradient checks run in `f64`.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod error;
pub mod gradcheck;
pub mod gru;
pub mod init;
pub mod linalg;
pub mod lstm;
pub mod pool;
pub mod tensor;

pub use activation::Activation;
pub use conv::{Conv1d, Conv1dCache};
pub use dense::{Dense, DenseCache};
pub use dropout::{Dropout, DropoutMask, Mode};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_seeded, relative_error, Checkable, GradCheckReport, MaxPoolProbe};
pub use gru::{Gru, GruCache};
pub use init::{glorot_bound, glorot_uniform, seeded_rng};
pub use linalg::Real;
pub use lstm::{Lstm, LstmCache};
pub use pool::{global_max_pool, global_max_pool_backward, PoolCache};
pub use tensor::{Parameters, Tensor};
