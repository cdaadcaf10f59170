//! Focal loss, rectified AdaBelief and the per-fold training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use neuralkit::{seeded_rng, Mode, Parameters, Tensor};

use crate::checkpoint::{Checkpoint, CheckpointMeta, TrainerState};
use crate::corpus::{sample_refs, Corpus, FoldPlan, IndexedSpeaker};
use crate::evaluation::{pr_auc, EvalError, ScoredSubject};
use crate::model::{fragments_tensor, predict_subject, Model, ModelConfig, ModelError, DEFAULT_REPEATS};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before the log.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("fold {fold} out of range for {k} folds")]
    FoldOutOfRange { fold: usize, k: usize },
    #[error("fold {0} leaves no training or no validation speakers")]
    EmptySplit(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("validation: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adabelief_eps: f64,
    pub rectify: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Bags per optimizer step.
    pub batch_size: usize,
    /// Independently drawn bags per training speaker in each epoch.
    pub bags_per_speaker: usize,
    pub max_epochs: usize,
    /// Epochs without a validation PR-AUC improvement before stopping.
    pub early_stop_patience: usize,
    /// Bags averaged per validation speaker.
    pub eval_repeats: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            adabelief_eps: 1e-7,
            rectify: true,
            beta1: 0.9,
            beta2: 0.999,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            batch_size: 8,
            bags_per_speaker: 1,
            max_epochs: 50,
            early_stop_patience: 10,
            eval_repeats: DEFAULT_REPEATS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad("focal_alpha must lie in (0, 1)");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.bags_per_speaker == 0 || self.max_epochs == 0 || self.eval_repeats == 0 {
            return bad("batch_size, bags_per_speaker, max_epochs and eval_repeats must be positive");
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over a base seed and tags; gives independent,
/// reproducible streams per fold, epoch and purpose.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base;
    for &t in tags {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(t);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal cross-entropy on a logit: returns the loss and its
/// derivative with respect to the logit.
///
/// `y = 1`: `-alpha (1-p)^gamma ln p`; `y = 0`: `-(1-alpha) p^gamma ln(1-p)`.
pub fn focal_loss(logit: f64, y: u8, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit).clamp(P_CLAMP, 1.0 - P_CLAMP);
    let q = 1.0 - p;
    if y == 1 {
        let ln_p = p.ln();
        let w = q.powf(gamma);
        (-alpha * w * ln_p, alpha * w * (gamma * p * ln_p - q))
    } else {
        let ln_q = q.ln();
        let w = p.powf(gamma);
        (-(1.0 - alpha) * w * ln_q, -(1.0 - alpha) * w * (gamma * q * ln_q - p))
    }
}

/// First and belief moments for every parameter, plus the step count.
pub type OptimizerState = TrainerState;

pub fn init_optimizer<P: Parameters<f32>>(params: &P) -> OptimizerState {
    let zeros: Vec<Tensor<f32>> = params.params().iter().map(|(_, t)| t.zeros_like()).collect();
    TrainerState { step: 0, first_moment: zeros.clone(), second_moment: zeros }
}

/// One rectified AdaBelief update. All gradients are checked before any
/// parameter or moment changes.
pub fn adabelief_step<P: Parameters<f32>>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let grads = grads.params();
    for (name, g) in &grads {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adabelief_eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    // variance rectification; below rho = 4 the adaptive step is unreliable
    // and a bias-corrected momentum step is taken instead
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let rho_t = rho_inf - 2.0 * t as f64 * b2.powi(t) / bc2;
    let rect = if !cfg.rectify {
        Some(1.0)
    } else if rho_t > 4.0 {
        Some(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
    } else {
        None
    };
    for (i, ((_, p), (_, g))) in params.params_mut().into_iter().zip(&grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let s = state.second_moment[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let sj = b2 * s[j] as f64 + (1.0 - b2) * (gj - mj) * (gj - mj) + eps;
            m[j] = mj as f32;
            s[j] = sj as f32;
            let m_hat = mj / bc1;
            let step = match rect {
                Some(r) => r * m_hat / ((sj / bc2).sqrt() + eps),
                None => m_hat,
            };
            *w = (*w as f64 - cfg.lr * step) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pr_auc: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().fold(None, |b: Option<&EpochRecord>, e| match b {
            Some(b) if b.val_pr_auc >= e.val_pr_auc => Some(b),
            _ => Some(e),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_pr_auc,best_so_far\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_pr_auc, e.best_so_far);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch.
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    /// Validation scores of the best epoch.
    pub val_scores: Vec<ScoredSubject>,
}

/// Mean probability per speaker over `repeats` bags drawn from a stream
/// seeded by `seed`.
pub fn score_speakers<'a>(
    model: &Model<f32>,
    speakers: impl IntoIterator<Item = &'a IndexedSpeaker>,
    repeats: usize,
    seed: u64,
) -> Result<Vec<ScoredSubject>, ModelError> {
    let mut rng = seeded_rng(seed);
    speakers
        .into_iter()
        .map(|s| {
            Ok(ScoredSubject {
                speaker_id: s.speaker_id().to_string(),
                score: predict_subject(model, s, repeats, &mut rng)?,
                label: s.label(),
                phq8: s.record.phq8,
            })
        })
        .collect()
}

/// Loss and gradients of one batch: one freshly drawn bag per speaker.
fn batch_step(
    model: &Model<f32>,
    speakers: &[&IndexedSpeaker],
    cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, Model<f32>), TrainError> {
    let n = model.config.n_fragments;
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for s in speakers {
        let picks = sample_refs(s, n, rng).map_err(ModelError::from)?;
        let t = fragments_tensor(s, &picks);
        shape = t.shape().to_vec();
        data.extend_from_slice(t.data());
    }
    shape[0] = speakers.len() * n;
    let x = Tensor::from_vec(&shape, data).map_err(ModelError::from)?;
    let (logits, cache) = model.forward(&x, Mode::Train, rng)?;
    let b = speakers.len() as f64;
    let mut loss = 0.0;
    let mut d_logits = Vec::with_capacity(logits.len());
    for (z, s) in logits.iter().zip(speakers) {
        let (l, d) = focal_loss(*z as f64, s.label(), cfg.focal_alpha, cfg.focal_gamma);
        loss += l / b;
        d_logits.push((d / b) as f32);
    }
    Ok((loss, model.backward(&cache, &d_logits)?))
}

/// Trains on every fold but `fold` and validates on `fold` after each epoch.
pub fn train(
    model_cfg: &ModelConfig,
    corpus: &Corpus,
    plan: &FoldPlan,
    fold: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress(model_cfg, corpus, plan, fold, cfg, |_| {})
}

pub fn train_with_progress(
    model_cfg: &ModelConfig,
    corpus: &Corpus,
    plan: &FoldPlan,
    fold: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if fold >= plan.k {
        return Err(TrainError::FoldOutOfRange { fold, k: plan.k });
    }
    let (mut train_set, mut val_set) = (Vec::new(), Vec::new());
    for s in corpus.usable() {
        match plan.fold_of(s.speaker_id()) {
            Some(f) if f == fold => val_set.push(s),
            Some(_) => train_set.push(s),
            None => {}
        }
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::EmptySplit(fold));
    }

    let fold_tag = fold as u64;
    let mut model = Model::<f32>::new(model_cfg.clone(), derive_seed(cfg.seed, &[fold_tag, 0]))?;
    // Start the output at the training prior so early steps don't spend
    // themselves dragging every logit toward it.
    let positives = train_set.iter().filter(|s| s.label() == 1).count() as f64;
    let prior = (positives / train_set.len() as f64).clamp(P_CLAMP, 1.0 - P_CLAMP);
    model.head_out.bias.data_mut()[0] = (prior / (1.0 - prior)).ln() as f32;
    let mut state = init_optimizer(&model);
    let val_seed = derive_seed(cfg.seed, &[fold_tag, 1]);
    let meta = |epoch| CheckpointMeta {
        seed: cfg.seed,
        epoch,
        fold: Some(fold),
        corpus_fingerprint: corpus.fingerprint(),
    };

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Checkpoint, Vec<ScoredSubject>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = seeded_rng(derive_seed(cfg.seed, &[fold_tag, 2, epoch as u64]));
        let mut order: Vec<&IndexedSpeaker> =
            train_set.iter().flat_map(|&s| std::iter::repeat_n(s, cfg.bags_per_speaker)).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_step(&model, batch, cfg, &mut rng)?;
            adabelief_step(&mut model, &grads, &mut state, cfg)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let scores = score_speakers(&model, val_set.iter().copied(), cfg.eval_repeats, val_seed)?;
        let val = pr_auc(&scores)?;
        let improved = best.as_ref().is_none_or(|(b, ..)| val > *b);
        if improved {
            let ck = Checkpoint { model: model.clone(), trainer_state: Some(state.clone()), meta: meta(epoch) };
            best = Some((val, ck, scores));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_pr_auc: val,
            best_so_far: best.as_ref().map_or(val, |b| b.0),
        };
        on_epoch(&record);
        history.epochs.push(record);
        if since_best >= cfg.early_stop_patience {
            break;
        }
    }
    let (_, checkpoint, val_scores) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { checkpoint, history, val_scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderType;
    use neuralkit::{grad_check, Checkable};
    use rand::Rng;

    #[test]
    fn focal_closed_forms() {
        let (l, _) = focal_loss(0.0, 1, 0.25, 2.0);
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);
        let (l0, _) = focal_loss(0.0, 1, 0.25, 0.0);
        assert!((l0 - 0.17329).abs() < 1e-5);
        assert!(focal_loss(30.0, 1, 0.25, 2.0).0 < 1e-12);
    }

    #[test]
    fn gamma_zero_is_weighted_bce() {
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let z = (p / (1.0 - p)).ln();
            let (l1, _) = focal_loss(z, 1, 0.25, 0.0);
            let (l0, _) = focal_loss(z, 0, 0.25, 0.0);
            assert!((l1 - -0.25 * sigmoid(z).ln()).abs() < 1e-12);
            assert!((l0 - -0.75 * (1.0 - sigmoid(z)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_gradient_matches_differences() {
        for y in [0u8, 1] {
            for gamma in [0.0, 1.0, 2.0, 3.5] {
                for i in -40..=40 {
                    let z = i as f64 / 5.0;
                    let (l, d) = focal_loss(z, y, 0.25, gamma);
                    assert!(l >= 0.0);
                    let h = 1e-6;
                    let num = (focal_loss(z + h, y, 0.25, gamma).0 - focal_loss(z - h, y, 0.25, gamma).0) / (2.0 * h);
                    let rel = (d - num).abs() / d.abs().max(num.abs()).max(1e-8);
                    assert!(rel < 1e-6, "y {y} gamma {gamma} z {z}: {d} vs {num}");
                }
            }
        }
    }

    #[test]
    fn easy_examples_down_weighted() {
        let ratio = |p: f64| {
            let z = (p / (1.0 - p)).ln();
            focal_loss(z, 1, 0.25, 2.0).0 / focal_loss(z, 1, 0.25, 0.0).0
        };
        assert!(ratio(0.9) < ratio(0.5));
    }

    /// Scalar parameter for optimizer tests.
    #[derive(Clone)]
    struct Scalar(Tensor<f32>);

    impl Parameters<f32> for Scalar {
        fn params(&self) -> Vec<(String, &Tensor<f32>)> {
            vec![("theta".into(), &self.0)]
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
            vec![("theta".into(), &mut self.0)]
        }
    }

    fn scalar(v: f32) -> Scalar {
        Scalar(Tensor::from_vec(&[1], vec![v]).unwrap())
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_parameters() {
        let mut p = scalar(0.7);
        let mut st = init_optimizer(&p);
        adabelief_step(&mut p, &scalar(0.0), &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(p.0.data()[0], 0.7);
        let cfg = TrainConfig { lr: 0.0, ..Default::default() };
        // lr = 0 is rejected by validate() but the step itself must be inert
        for _ in 0..10 {
            adabelief_step(&mut p, &scalar(3.0), &mut st, &cfg).unwrap();
        }
        assert_eq!(p.0.data()[0], 0.7);
    }

    #[test]
    fn quadratic_descends() {
        let cfg = TrainConfig { lr: 1e-2, ..Default::default() };
        let mut p = scalar(1.0);
        let mut st = init_optimizer(&p);
        let mut prev = 1.0f32;
        for _ in 0..100 {
            let theta = p.0.data()[0];
            adabelief_step(&mut p, &scalar(2.0 * theta), &mut st, &cfg).unwrap();
            let f = p.0.data()[0].powi(2);
            assert!(f < prev, "{f} !< {prev}");
            prev = f;
        }
    }

    #[test]
    fn update_is_odd_in_the_gradient() {
        let cfg = TrainConfig { lr: 1e-2, ..Default::default() };
        let (mut a, mut b) = (scalar(0.0), scalar(0.0));
        let (mut sa, mut sb) = (init_optimizer(&a), init_optimizer(&b));
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let g: f32 = rng.gen_range(-1.0..1.0);
            adabelief_step(&mut a, &scalar(g), &mut sa, &cfg).unwrap();
            adabelief_step(&mut b, &scalar(-g), &mut sb, &cfg).unwrap();
            assert_eq!(a.0.data()[0], -b.0.data()[0]);
        }
    }

    #[test]
    fn early_steps_use_momentum_only() {
        // rho_t <= 4 for the first few steps with beta2 = 0.999
        let cfg = TrainConfig::default();
        let mut p = scalar(0.0);
        let mut st = init_optimizer(&p);
        adabelief_step(&mut p, &scalar(0.5), &mut st, &cfg).unwrap();
        // m_hat equals the gradient after one step
        assert!((p.0.data()[0] as f64 + cfg.lr * 0.5).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar(1.0);
        let mut st = init_optimizer(&p);
        let err = adabelief_step(&mut p, &scalar(f32::NAN), &mut st, &TrainConfig::default());
        assert!(matches!(err, Err(TrainError::NonFiniteGradient(n)) if n == "theta"));
        assert_eq!(st.step, 0);
        assert_eq!(p.0.data()[0], 1.0);
    }

    #[test]
    fn seeds_are_distinct() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
    }

    /// Summed focal loss over bags as a checkable map.
    struct FocalHead {
        model: Model<f64>,
        labels: Vec<u8>,
    }

    impl Checkable for FocalHead {
        fn output(&self, x: &Tensor<f64>) -> Tensor<f64> {
            let (logits, _) = self.model.forward(x, Mode::Infer, &mut seeded_rng(0)).unwrap();
            let loss: f64 = logits.iter().zip(&self.labels).map(|(&z, &y)| focal_loss(z, y, 0.25, 2.0).0).sum();
            Tensor::from_vec(&[1], vec![loss]).unwrap()
        }
        fn gradients(&self, x: &Tensor<f64>, d_out: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
            let (logits, cache) = self.model.forward(x, Mode::Infer, &mut seeded_rng(0)).unwrap();
            let d: Vec<f64> = logits
                .iter()
                .zip(&self.labels)
                .map(|(&z, &y)| focal_loss(z, y, 0.25, 2.0).1 * d_out.data()[0])
                .collect();
            let (dx, g) = self.model.backward_with_input(&cache, &d).unwrap();
            (dx, g.params().into_iter().map(|(_, t)| t.clone()).collect())
        }
        fn parameters_mut(&mut self) -> Vec<&mut Tensor<f64>> {
            self.model.params_mut().into_iter().map(|(_, t)| t).collect()
        }
    }

    #[test]
    fn end_to_end_loss_gradients() {
        for enc in EncoderType::ALL {
            let cfg = ModelConfig {
                encoder_type: enc,
                kernel_size: 3,
                n_fragments: 2,
                n_bands: 10,
                n_frames: 4,
                n_filters: 4,
                rnn_hidden: 4,
                feature_dim: 8,
                head_hidden: 5,
                dropout: 0.1,
            };
            let mut model = Model::<f64>::new(cfg, 3).unwrap();
            for (_, t) in model.params_mut() {
                if t.shape().len() == 1 {
                    for v in t.data_mut() {
                        *v += 0.05;
                    }
                }
            }
            let mut rng = seeded_rng(4);
            let x = Tensor::from_vec(&[6, 10, 4], (0..240).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let mut head = FocalHead { model, labels: vec![1, 0, 1] };
            let report = grad_check(&mut head, &x, 1e-5, 400);
            assert!(report.max_rel_error < 1e-3, "{enc}: {report:?}");
        }
    }
}
