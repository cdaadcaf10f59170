//! Time-distributed fragment encoder and flatten-dense classification head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use neuralkit::{
    global_max_pool, global_max_pool_backward, seeded_rng, Activation, Conv1d, Conv1dCache, Dense, DenseCache,
    Dropout, DropoutMask, Gru, GruCache, Lstm, LstmCache, Mode, NnError, Parameters, PoolCache, Real, Tensor,
};

use crate::corpus::{sample_refs, CorpusError, FragmentRef, IndexedSpeaker, SAMPLE_SIZES};
use crate::features::{FRAGMENT_FRAMES, N_MELS};

pub const KERNEL_SIZES: [usize; 3] = [3, 5, 7];
/// Bags averaged by [`predict_subject`] unless told otherwise.
pub const DEFAULT_REPEATS: usize = 10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error("expected {expected} fragments per bag, got {got}")]
    BatchSizeMismatch { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EncoderType {
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "CNN_LSTM")]
    CnnLstm,
    #[serde(rename = "CNN_GRU")]
    CnnGru,
}

impl EncoderType {
    pub const ALL: [EncoderType; 3] = [EncoderType::Cnn, EncoderType::CnnLstm, EncoderType::CnnGru];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderType::Cnn => "CNN",
            EncoderType::CnnLstm => "CNN_LSTM",
            EncoderType::CnnGru => "CNN_GRU",
        }
    }
}

impl fmt::Display for EncoderType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let norm: String = s.trim().to_ascii_uppercase().replace(['-', ' '], "_");
        match norm.trim_start_matches("1D_") {
            "CNN" => Ok(EncoderType::Cnn),
            "CNN_LSTM" => Ok(EncoderType::CnnLstm),
            "CNN_GRU" => Ok(EncoderType::CnnGru),
            _ => Err(format!("unknown encoder type `{s}` (expected CNN, CNN_LSTM or CNN_GRU)")),
        }
    }
}

/// Architecture hyper-parameters. Dimensions other than the grid axes are
/// exposed so tests can build tiny models; [`ModelConfig::validate_grid`]
/// pins them to the searched architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_type: EncoderType,
    pub kernel_size: usize,
    pub n_fragments: usize,
    pub n_bands: usize,
    pub n_frames: usize,
    pub n_filters: usize,
    pub rnn_hidden: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_type: EncoderType::CnnGru,
            kernel_size: 5,
            n_fragments: 15,
            n_bands: N_MELS,
            n_frames: FRAGMENT_FRAMES,
            n_filters: 128,
            rnn_hidden: 128,
            feature_dim: 128,
            head_hidden: 128,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn new(encoder_type: EncoderType, kernel_size: usize, n_fragments: usize) -> Self {
        Self { encoder_type, kernel_size, n_fragments, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        let dims = [
            self.n_fragments,
            self.n_bands,
            self.n_frames,
            self.n_filters,
            self.rnn_hidden,
            self.feature_dim,
            self.head_hidden,
        ];
        if dims.contains(&0) {
            return bad("all dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// The searched architecture: enumerated axes, fixed 128-wide layers.
    pub fn validate_grid(&self) -> Result<(), ModelError> {
        self.validate()?;
        if !KERNEL_SIZES.contains(&self.kernel_size) {
            return Err(ModelError::InvalidConfig(format!("kernel_size {} not in {{3, 5, 7}}", self.kernel_size)));
        }
        if !SAMPLE_SIZES.contains(&self.n_fragments) {
            return Err(ModelError::InvalidConfig(format!(
                "n_fragments {} not in {{5, 10, 15, 30, 60}}",
                self.n_fragments
            )));
        }
        let fixed = Self::new(self.encoder_type, self.kernel_size, self.n_fragments);
        if *self != fixed {
            return Err(ModelError::InvalidConfig("layer widths must be 128 with dropout 0.1".into()));
        }
        Ok(())
    }

    /// Width of the flattened head input.
    pub fn head_input(&self) -> usize {
        self.n_fragments * self.feature_dim
    }

    /// Width of the sequence entering global max pooling.
    fn pooled_width(&self) -> usize {
        match self.encoder_type {
            EncoderType::Cnn => self.n_filters,
            _ => self.rnn_hidden,
        }
    }

    /// Short stable identifier, e.g. `CNN_GRU-k5-n15`.
    pub fn tag(&self) -> String {
        format!("{}-k{}-n{}", self.encoder_type, self.kernel_size, self.n_fragments)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Recurrent<T> {
    None,
    Lstm(Lstm<T>),
    Gru(Gru<T>),
}

#[derive(Debug, Clone)]
enum RecurrentCache<T> {
    None,
    Lstm(LstmCache<T>),
    Gru(GruCache<T>),
}

/// Encoder and head weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub conv: Conv1d<T>,
    pub recurrent: Recurrent<T>,
    pub encoder_dense: Dense<T>,
    pub head_hidden: Dense<T>,
    pub head_out: Dense<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    conv: Conv1dCache<T>,
    recurrent: RecurrentCache<T>,
    pool: PoolCache,
    dense: DenseCache<T>,
    mask: DropoutMask<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    encoder: EncoderCache<T>,
    bags: usize,
    hidden: DenseCache<T>,
    hidden_mask: DropoutMask<T>,
    out: DenseCache<T>,
}

impl<T: Real> Model<T> {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let c = &config;
        let conv = Conv1d::new(c.kernel_size, c.n_frames, c.n_filters, Activation::Relu, &mut rng);
        let recurrent = match c.encoder_type {
            EncoderType::Cnn => Recurrent::None,
            EncoderType::CnnLstm => Recurrent::Lstm(Lstm::new(c.n_filters, c.rnn_hidden, &mut rng)),
            EncoderType::CnnGru => Recurrent::Gru(Gru::new(c.n_filters, c.rnn_hidden, &mut rng)),
        };
        let encoder_dense = Dense::new(c.pooled_width(), c.feature_dim, Activation::Relu, &mut rng);
        let head_hidden = Dense::new(c.head_input(), c.head_hidden, Activation::Relu, &mut rng);
        let head_out = Dense::new(c.head_hidden, 1, Activation::Identity, &mut rng);
        Ok(Self { config, conv, recurrent, encoder_dense, head_hidden, head_out })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            conv: self.conv.zeros_like(),
            recurrent: match &self.recurrent {
                Recurrent::None => Recurrent::None,
                Recurrent::Lstm(l) => Recurrent::Lstm(l.zeros_like()),
                Recurrent::Gru(g) => Recurrent::Gru(g.zeros_like()),
            },
            encoder_dense: self.encoder_dense.zeros_like(),
            head_hidden: self.head_hidden.zeros_like(),
            head_out: self.head_out.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            conv: self.conv.cast(),
            recurrent: match &self.recurrent {
                Recurrent::None => Recurrent::None,
                Recurrent::Lstm(l) => Recurrent::Lstm(l.cast()),
                Recurrent::Gru(g) => Recurrent::Gru(g.cast()),
            },
            encoder_dense: self.encoder_dense.cast(),
            head_hidden: self.head_hidden.cast(),
            head_out: self.head_out.cast(),
        }
    }

    fn dropout(&self) -> Dropout {
        Dropout::new(self.config.dropout)
    }

    /// Encodes `[M, bands, frames]` fragments into `[M, feature_dim]`.
    /// Fragments never interact, so a row's encoding does not depend on the
    /// rest of the batch.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, EncoderCache<T>), ModelError> {
        let c = &self.config;
        match *x.shape() {
            [_, b, f] if b == c.n_bands && f == c.n_frames => {}
            _ => {
                return Err(NnError::ShapeMismatch {
                    context: "fragment batch",
                    expected: vec![x.shape().first().copied().unwrap_or(0), c.n_bands, c.n_frames],
                    got: x.shape().to_vec(),
                }
                .into())
            }
        }
        // band-major fragments: frequency is the sequence axis, time frames
        // are the input channels
        let (conv_out, conv) = self.conv.forward(x)?;
        let (seq, recurrent) = match &self.recurrent {
            Recurrent::None => (conv_out, RecurrentCache::None),
            Recurrent::Lstm(l) => {
                let (y, cache) = l.forward(&conv_out)?;
                (y, RecurrentCache::Lstm(cache))
            }
            Recurrent::Gru(g) => {
                let (y, cache) = g.forward(&conv_out)?;
                (y, RecurrentCache::Gru(cache))
            }
        };
        let (pooled, pool) = global_max_pool(&seq)?;
        let (dense_out, dense) = self.encoder_dense.forward(&pooled)?;
        let (features, mask) = self.dropout().forward(&dense_out, mode, rng);
        Ok((features, EncoderCache { conv, recurrent, pool, dense, mask }))
    }

    /// Returns the gradient with respect to the fragments.
    fn encode_backward(
        &self,
        cache: &EncoderCache<T>,
        d_features: &Tensor<T>,
        grads: &mut Self,
    ) -> Result<Tensor<T>, ModelError> {
        let d = self.dropout().backward(&cache.mask, d_features);
        let (d_pooled, g) = self.encoder_dense.backward(&cache.dense, &d)?;
        grads.encoder_dense = g;
        let d_seq = global_max_pool_backward(&cache.pool, &d_pooled)?;
        let d_conv = match (&self.recurrent, &cache.recurrent) {
            (Recurrent::None, RecurrentCache::None) => d_seq,
            (Recurrent::Lstm(l), RecurrentCache::Lstm(c)) => {
                let (dx, g) = l.backward(c, &d_seq)?;
                grads.recurrent = Recurrent::Lstm(g);
                dx
            }
            (Recurrent::Gru(r), RecurrentCache::Gru(c)) => {
                let (dx, g) = r.backward(c, &d_seq)?;
                grads.recurrent = Recurrent::Gru(g);
                dx
            }
            _ => unreachable!("cache built by this model"),
        };
        let (dx, g) = self.conv.backward(&cache.conv, &d_conv)?;
        grads.conv = g;
        Ok(dx)
    }

    /// Head on flattened bags `[B, N * feature_dim]`; returns logits `[B, 1]`
    /// and the hidden activations before dropout.
    fn head<R: Rng + ?Sized>(
        &self,
        flat: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Tensor<T>, DenseCache<T>, DropoutMask<T>, DenseCache<T>), ModelError> {
        let (hidden, hidden_cache) = self.head_hidden.forward(flat)?;
        let (dropped, mask) = self.dropout().forward(&hidden, mode, rng);
        let (logits, out_cache) = self.head_out.forward(&dropped)?;
        Ok((logits, hidden, hidden_cache, mask, out_cache))
    }

    /// Forward pass over `B` bags stacked as `[B * N, bands, frames]`, bag
    /// by bag in draw order. Returns one logit per bag.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<T>, ForwardCache<T>), ModelError> {
        let n = self.config.n_fragments;
        let rows = x.shape().first().copied().unwrap_or(0);
        if rows == 0 || rows % n != 0 {
            return Err(ModelError::BatchSizeMismatch { expected: n, got: rows });
        }
        let bags = rows / n;
        let (features, encoder) = self.encode(x, mode, rng)?;
        // [B * N, F] row-major is already [B, N * F]: flatten keeps draw order
        let flat = features.reshape(&[bags, self.config.head_input()])?;
        let (logits, _, hidden, hidden_mask, out) = self.head(&flat, mode, rng)?;
        Ok((logits.into_data(), ForwardCache { encoder, bags, hidden, hidden_mask, out }))
    }

    /// Parameter gradients given d(loss)/d(logit) per bag.
    pub fn backward(&self, cache: &ForwardCache<T>, d_logits: &[T]) -> Result<Self, ModelError> {
        Ok(self.backward_with_input(cache, d_logits)?.1)
    }

    /// Fragment gradients as well as parameter gradients.
    pub fn backward_with_input(&self, cache: &ForwardCache<T>, d_logits: &[T]) -> Result<(Tensor<T>, Self), ModelError> {
        let mut grads = self.zeros_like();
        let d_out = Tensor::from_vec(&[cache.bags, 1], d_logits.to_vec())?;
        let (d_dropped, g) = self.head_out.backward(&cache.out, &d_out)?;
        grads.head_out = g;
        let d_hidden = self.dropout().backward(&cache.hidden_mask, &d_dropped);
        let (d_flat, g) = self.head_hidden.backward(&cache.hidden, &d_hidden)?;
        grads.head_hidden = g;
        let d_features = d_flat.reshape(&[cache.bags * self.config.n_fragments, self.config.feature_dim])?;
        let dx = self.encode_backward(&cache.encoder, &d_features, &mut grads)?;
        Ok((dx, grads))
    }
}

fn prefixed<'p, X: 'p>(prefix: &'p str, list: Vec<(String, X)>) -> impl Iterator<Item = (String, X)> + 'p {
    list.into_iter().map(move |(name, t)| (format!("{prefix}.{name}"), t))
}

impl<T: Real> Parameters<T> for Model<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<_> = prefixed("conv", self.conv.params()).collect();
        match &self.recurrent {
            Recurrent::None => {}
            Recurrent::Lstm(l) => out.extend(prefixed("lstm", l.params())),
            Recurrent::Gru(g) => out.extend(prefixed("gru", g.params())),
        }
        out.extend(prefixed("encoder_dense", self.encoder_dense.params()));
        out.extend(prefixed("head_hidden", self.head_hidden.params()));
        out.extend(prefixed("head_out", self.head_out.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<_> = prefixed("conv", self.conv.params_mut()).collect();
        match &mut self.recurrent {
            Recurrent::None => {}
            Recurrent::Lstm(l) => out.extend(prefixed("lstm", l.params_mut())),
            Recurrent::Gru(g) => out.extend(prefixed("gru", g.params_mut())),
        }
        out.extend(prefixed("encoder_dense", self.encoder_dense.params_mut()));
        out.extend(prefixed("head_hidden", self.head_hidden.params_mut()));
        out.extend(prefixed("head_out", self.head_out.params_mut()));
        out
    }
}

/// Stacks the referenced fragments of one speaker as `[len, bands, frames]`.
pub fn fragments_tensor(speaker: &IndexedSpeaker, picks: &[FragmentRef]) -> Tensor<f32> {
    let bands = speaker.recordings.first().map_or(N_MELS, |r| r.spectrogram.n_mels);
    let per = bands * FRAGMENT_FRAMES;
    let mut data = vec![0.0f32; picks.len() * per];
    for (chunk, &r) in data.chunks_mut(per).zip(picks) {
        speaker.fill_fragment(r, chunk);
    }
    Tensor::from_vec(&[picks.len(), bands, FRAGMENT_FRAMES], data).expect("sized above")
}

/// Encodes fragments one by one in inference mode: `[M, bands, frames]` to
/// `[M, feature_dim]`.
pub fn encode_fragments(model: &Model<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
    Ok(model.encode(x, Mode::Infer, &mut seeded_rng(0))?.0)
}

/// Depression probability for one bag of exactly `n_fragments` fragments,
/// dropout off.
pub fn predict(model: &Model<f32>, bag: &Tensor<f32>) -> Result<f64, ModelError> {
    let n = model.config.n_fragments;
    let got = bag.shape().first().copied().unwrap_or(0);
    if got != n {
        return Err(ModelError::BatchSizeMismatch { expected: n, got });
    }
    let (logits, _) = model.forward(bag, Mode::Infer, &mut seeded_rng(0))?;
    Ok(logits[0].sigmoid() as f64)
}

/// Mean probability over `repeats` independently drawn bags.
///
/// Each distinct fragment is encoded once; bags are then assembled from the
/// cached vectors, which gives the same numbers as encoding each bag
/// separately because encoding is per fragment.
pub fn predict_subject<R: Rng + ?Sized>(
    model: &Model<f32>,
    speaker: &IndexedSpeaker,
    repeats: usize,
    rng: &mut R,
) -> Result<f64, ModelError> {
    assert!(repeats >= 1, "need at least one repeat");
    let n = model.config.n_fragments;
    let bags: Vec<Vec<FragmentRef>> =
        (0..repeats).map(|_| sample_refs(speaker, n, rng)).collect::<Result<_, _>>()?;
    let mut row_of: BTreeMap<FragmentRef, usize> = BTreeMap::new();
    for r in bags.iter().flatten() {
        let next = row_of.len();
        row_of.entry(*r).or_insert(next);
    }
    let mut unique = vec![FragmentRef { recording: 0, start_frame: 0 }; row_of.len()];
    for (r, &i) in &row_of {
        unique[i] = *r;
    }
    let encoded = encode_fragments(model, &fragments_tensor(speaker, &unique))?;
    let f = model.config.feature_dim;
    let mut flat = Vec::with_capacity(repeats * n * f);
    for r in bags.iter().flatten() {
        let i = row_of[r];
        flat.extend_from_slice(&encoded.data()[i * f..(i + 1) * f]);
    }
    let flat = Tensor::from_vec(&[repeats, n * f], flat)?;
    let (logits, ..) = model.head(&flat, Mode::Infer, &mut seeded_rng(0))?;
    Ok(logits.data().iter().map(|l| l.sigmoid() as f64).sum::<f64>() / repeats as f64)
}
