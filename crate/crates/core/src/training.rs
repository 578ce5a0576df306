//! Cross-entropy training with Adam, evaluation, and whole-model gradient
//! checks.

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledExample;
use crate::embeddings::{CharVocab, WordVectorStore};
use crate::metrics::{classification_metrics, MetricsError, MetricsReport};
use crate::model::{argmax, GeoModel, ModelError, TweetFeatures};
use crate::tensor::{BackwardFault, ParamId, ParamSet, Tape, TensorError, LOG_CLAMP};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in batch {batch}")]
    NonFinite {
        batch: usize,
        #[source]
        source: TensorError,
    },
    #[error("no training examples")]
    Empty,
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a dev-accuracy improvement.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 10,
            patience: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so that a run can be checked to
    /// leave the parameters untouched.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// `-ln(max(dist[label], 1e-12))`.
pub fn cross_entropy(dist: &[f64], label: usize) -> Result<f64, TrainError> {
    let p = dist.get(label).ok_or(TrainError::LabelOutOfRange {
        label,
        classes: dist.len(),
    })?;
    Ok(-p.max(LOG_CLAMP).ln())
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients held in `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                w[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the predictions made during the epoch, before each
    /// batch's update.
    pub train_accuracy: f64,
    pub dev_accuracy: Option<f64>,
}

impl EpochStats {
    /// `epoch,mean_loss,train_acc,dev_acc`; dev_acc is empty when absent.
    pub fn to_log_line(&self) -> String {
        let dev = self
            .dev_accuracy
            .map(|a| format!("{a:.6}"))
            .unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{}",
            self.epoch, self.mean_loss, self.train_accuracy, dev
        )
    }
}

pub const LOG_HEADER: &str = "epoch,mean_loss,train_acc,dev_acc";

struct Prepared {
    features: TweetFeatures,
    label: usize,
}

/// Loss and correctness of one example; gradients are added into the
/// parameter slots scaled by `scale`.
fn example_step(
    model: &GeoModel,
    params: &ParamSet,
    store: &WordVectorStore,
    ex: &Prepared,
    fault: Option<BackwardFault>,
) -> Result<(f64, bool, crate::tensor::Gradients), ModelError> {
    let mut tape = match fault {
        Some(f) => Tape::with_fault(params, f),
        None => Tape::new(params),
    };
    let probs = model.forward_traced(&mut tape, store, &ex.features)?;
    let correct = argmax(tape.value(probs).data()) == ex.label;
    let loss = tape.neg_log_pick(probs, ex.label)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, correct, grads))
}

fn batch_loss(
    model: &GeoModel,
    params: &ParamSet,
    store: &WordVectorStore,
    batch: &[Prepared],
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::new(params);
        let probs = model.forward_traced(&mut tape, store, &ex.features)?;
        let loss = tape.neg_log_pick(probs, ex.label)?;
        total += tape.value(loss).data()[0];
    }
    Ok(total / batch.len() as f64)
}

fn prepare(
    model: &GeoModel,
    cvocab: &CharVocab,
    data: &[LabeledExample],
) -> Result<Vec<Prepared>, TrainError> {
    let classes = model.config().num_classes;
    data.iter()
        .map(|ex| {
            if ex.label >= classes {
                return Err(TrainError::LabelOutOfRange {
                    label: ex.label,
                    classes,
                });
            }
            Ok(Prepared {
                features: model.features(&ex.tweet, cvocab),
                label: ex.label,
            })
        })
        .collect()
}

fn non_finite(batch: usize, err: ModelError) -> TrainError {
    match err {
        ModelError::Tensor(source) => TrainError::NonFinite { batch, source },
        other => TrainError::Model(other),
    }
}

/// Owns the model and optimizer state across epochs.
pub struct Trainer<'s> {
    model: GeoModel,
    store: &'s WordVectorStore,
    cvocab: CharVocab,
    cfg: TrainConfig,
    optimizer: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'s> Trainer<'s> {
    pub fn new(
        model: GeoModel,
        store: &'s WordVectorStore,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let optimizer = Adam::new(&cfg, model.params());
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            store,
            cvocab: CharVocab::default(),
            cfg,
            optimizer,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &GeoModel {
        &self.model
    }

    pub fn into_model(self) -> GeoModel {
        self.model
    }

    /// One shuffled pass: per mini-batch, zero grads, mean cross-entropy,
    /// backward, Adam step.
    pub fn train_epoch(&mut self, data: &[LabeledExample]) -> Result<EpochStats, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Empty);
        }
        let mut prepared = prepare(&self.model, &self.cvocab, data)?;
        prepared.shuffle(&mut self.rng);
        self.epoch += 1;

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in prepared.chunks(self.cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut params = std::mem::take(self.model.params_mut());
            params.zero_grads();
            let mut batch_loss = 0.0;
            for ex in batch {
                let (loss, ok, grads) =
                    match example_step(&self.model, &params, self.store, ex, None) {
                        Ok(r) => r,
                        Err(e) => {
                            *self.model.params_mut() = params;
                            return Err(non_finite(b, e));
                        }
                    };
                params.accumulate(&grads, scale);
                batch_loss += loss;
                correct += ok as usize;
            }
            if !batch_loss.is_finite() {
                *self.model.params_mut() = params;
                return Err(TrainError::NonFinite {
                    batch: b,
                    source: TensorError::NonFinite { op: "loss" },
                });
            }
            loss_sum += batch_loss;
            self.optimizer.step(&mut params);
            *self.model.params_mut() = params;
        }
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            dev_accuracy: None,
        })
    }

    pub fn evaluate(&self, data: &[LabeledExample]) -> Result<MetricsReport, TrainError> {
        evaluate(&self.model, self.store, &self.cvocab, data)
    }

    /// Trains up to `max_epochs`, logging every epoch. With a dev set and a
    /// patience, stops early and restores the best-dev parameters.
    pub fn fit(
        &mut self,
        train: &[LabeledExample],
        dev: &[LabeledExample],
        mut log: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>, TrainError> {
        let mut history = Vec::new();
        let mut best: Option<(f64, ParamSet)> = None;
        let mut since_best = 0usize;
        for _ in 0..self.cfg.max_epochs {
            let mut stats = self.train_epoch(train)?;
            if !dev.is_empty() {
                let acc = self.evaluate(dev)?.accuracy;
                stats.dev_accuracy = Some(acc);
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, self.model.params().clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
            log(&stats);
            history.push(stats);
            if self.cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
        if let (Some(_), Some((_, params))) = (self.cfg.patience, best) {
            *self.model.params_mut() = params;
        }
        Ok(history)
    }
}

/// Metrics of argmax predictions against gold labels. Does not touch the
/// parameters.
pub fn evaluate(
    model: &GeoModel,
    store: &WordVectorStore,
    cvocab: &CharVocab,
    data: &[LabeledExample],
) -> Result<MetricsReport, TrainError> {
    let tweets: Vec<_> = data.iter().map(|e| e.tweet.clone()).collect();
    let mut pred = Vec::with_capacity(data.len());
    for r in model.predict_batch(&tweets, store, cvocab) {
        pred.push(r?.label);
    }
    let gold: Vec<usize> = data.iter().map(|e| e.label).collect();
    Ok(classification_metrics(&gold, &pred)?)
}

/// Mean cross-entropy over `data` at the current parameters.
pub fn evaluate_loss(
    model: &GeoModel,
    store: &WordVectorStore,
    cvocab: &CharVocab,
    data: &[LabeledExample],
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let prepared = prepare(model, cvocab, data)?;
    Ok(batch_loss(model, model.params(), store, &prepared)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Tensors with more scalars than this are checked on a seeded sample
    /// of this many positions.
    pub max_per_tensor: usize,
    /// Lower bound on the relative-error denominator, so that gradients
    /// that are zero up to rounding compare in absolute terms.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_per_tensor: 200,
            denominator_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub scalars: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<20} {:>7}/{:<7} max_rel_err={:.3e} {}",
                t.name,
                t.checked,
                t.scalars,
                t.max_rel_error,
                if t.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "overall max_rel_err={:.3e} tol={:.0e} {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares the analytic gradient of the batch-mean cross-entropy with
/// central differences, tensor by tensor.
pub fn grad_check(
    model: &GeoModel,
    store: &WordVectorStore,
    batch: &[LabeledExample],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TrainError> {
    grad_check_inner(model, store, batch, cfg, None)
}

/// Same as [`grad_check`] with a deliberately broken backward rule.
#[doc(hidden)]
pub fn grad_check_with_fault(
    model: &GeoModel,
    store: &WordVectorStore,
    batch: &[LabeledExample],
    cfg: &GradCheckConfig,
    fault: BackwardFault,
) -> Result<GradCheckReport, TrainError> {
    grad_check_inner(model, store, batch, cfg, Some(fault))
}

fn grad_check_inner(
    model: &GeoModel,
    store: &WordVectorStore,
    batch: &[LabeledExample],
    cfg: &GradCheckConfig,
    fault: Option<BackwardFault>,
) -> Result<GradCheckReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Empty);
    }
    let prepared = prepare(model, &CharVocab::default(), batch)?;
    let mut analytic = model.params().clone();
    analytic.zero_grads();
    let scale = 1.0 / prepared.len() as f64;
    for ex in &prepared {
        let (_, _, grads) = example_step(model, model.params(), store, ex, fault)?;
        analytic.accumulate(&grads, scale);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = model.params().clone();
    let mut tensors = Vec::new();
    for (i, p) in analytic.iter().enumerate() {
        let id = ParamId(i);
        let n = p.value.len();
        let positions: Vec<usize> = if n <= cfg.max_per_tensor {
            (0..n).collect()
        } else {
            let mut pos = index::sample(&mut rng, n, cfg.max_per_tensor).into_vec();
            pos.sort_unstable();
            pos
        };
        let mut worst = 0.0f64;
        for &j in &positions {
            let orig = work.get(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + cfg.epsilon;
            let plus = batch_loss(model, &work, store, &prepared)?;
            work.get_mut(id).value.data_mut()[j] = orig - cfg.epsilon;
            let minus = batch_loss(model, &work, store, &prepared)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let a = p.grad.data()[j];
            let denom = a.abs().max(numeric.abs()).max(cfg.denominator_floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        tensors.push(TensorCheck {
            name: p.name.clone(),
            scalars: n,
            checked: positions.len(),
            max_rel_error: worst,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: cfg.tolerance,
    })
}
