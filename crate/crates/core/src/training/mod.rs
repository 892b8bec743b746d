//! Mini-batch Adam with validation-based checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradientSet, ParamId, Tape};
use crate::datasets::DatasetSplit;
use crate::models::{Model, ModelError};
use crate::tensor::TensorError;

/// Examples per forward pass when only predictions are needed.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    /// `batch` is 1-based; 0 means the end-of-epoch evaluation overflowed.
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss or gradient")]
    Diverged { epoch: usize, batch: usize },
    #[error("optimizer state does not match parameter {index}: {reason}")]
    Shape { index: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} = {b} must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter of `model`.
///
/// Moments are zero-initialized on the first call. A parameter missing from
/// `grads` is an error.
pub fn adam_step(
    model: &mut Model,
    grads: &GradientSet,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let n = model.params().len();
    if state.m.is_empty() {
        state.m = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != n {
        return Err(TrainError::Shape {
            index: state.m.len().min(n),
            reason: format!("state holds {} tensors, model has {n}", state.m.len()),
        });
    }
    for i in 0..n {
        let g = grads.get(ParamId(i)).ok_or_else(|| TrainError::Shape {
            index: i,
            reason: "no gradient".into(),
        })?;
        let len = model.params()[i].len();
        if g.shape() != model.params()[i].shape() || state.m[i].len() != len {
            return Err(TrainError::Shape {
                index: i,
                reason: format!("gradient {:?} vs parameter {:?}", g.shape(), model.params()[i].shape()),
            });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for i in 0..n {
        let g = grads.get(ParamId(i)).expect("checked above").data();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = model.param_mut(ParamId(i)).data_mut();
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Fraction of correctly classified examples.
pub fn evaluate_accuracy(model: &Model, split: &DatasetSplit) -> Result<f64, TrainError> {
    if split.is_empty() {
        return Err(TrainError::Data("cannot evaluate on an empty split".into()));
    }
    let preds = predict_split(model, split)?;
    let correct = preds.iter().zip(split.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / split.len() as f64)
}

/// Predicted classes of every example, in split order.
pub fn predict_split(model: &Model, split: &DatasetSplit) -> Result<Vec<usize>, TrainError> {
    check_compatible(model, split)?;
    let mut preds = Vec::with_capacity(split.len());
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        preds.extend(model.predict(&split.batch(chunk))?);
    }
    Ok(preds)
}

fn check_compatible(model: &Model, split: &DatasetSplit) -> Result<(), TrainError> {
    let spec = model.spec();
    if spec.input_shape != split.input_shape() {
        return Err(ModelError::InputShape {
            expected: spec.input_shape.clone(),
            found: split.input_shape().to_vec(),
        }
        .into());
    }
    if spec.classes != split.classes() {
        return Err(TrainError::Data(format!(
            "model has {} classes, data has {}",
            spec.classes,
            split.classes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Example-weighted mean of the batch losses.
    pub train_loss: f64,
    pub valid_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
}

impl TrainHistory {
    pub fn selected(&self) -> &EpochRecord {
        &self.epochs[self.selected_epoch - 1]
    }
}

/// Trains and returns the parameters of the epoch with the best validation
/// accuracy (the earliest on ties) together with the full history.
pub fn train(
    model: Model,
    train_split: &DatasetSplit,
    valid: &DatasetSplit,
    test: &DatasetSplit,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory), TrainError> {
    train_with(model, train_split, valid, test, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    mut model: Model,
    train_split: &DatasetSplit,
    valid: &DatasetSplit,
    test: &DatasetSplit,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory), TrainError> {
    config.validate()?;
    for (name, s) in [("train", train_split), ("validation", valid), ("test", test)] {
        if s.is_empty() {
            return Err(TrainError::Data(format!("{name} split is empty")));
        }
        check_compatible(&model, s)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..train_split.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let diverged = || TrainError::Diverged { epoch, batch: b + 1 };
            let x = train_split.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_split.labels()[i]).collect();
            let tape = Tape::new();
            let loss = match model.loss(&tape, &x, &labels) {
                Ok(l) => l,
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => return Err(diverged()),
                Err(e) => return Err(e.into()),
            };
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(diverged());
            }
            let grads = match loss.backward() {
                Ok(g) => g.into_params(),
                Err(TensorError::NonFinite { .. }) => return Err(diverged()),
                Err(e) => return Err(ModelError::from(e).into()),
            };
            adam_step(&mut model, &grads, &mut state, config)?;
            if model.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged());
            }
            loss_sum += value * chunk.len() as f64;
        }
        // overflow while scoring finite parameters is still divergence
        let score = |split| match evaluate_accuracy(&model, split) {
            Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))) => {
                Err(TrainError::Diverged { epoch, batch: 0 })
            }
            r => r,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_split.len() as f64,
            valid_accuracy: score(valid)?,
            test_accuracy: score(test)?,
        };
        on_epoch(&record);
        if best.as_ref().map_or(true, |(acc, _, _)| record.valid_accuracy > *acc) {
            best = Some((record.valid_accuracy, epoch, model.clone()));
        }
        records.push(record);
    }
    let (_, selected_epoch, selected) = best.expect("at least one epoch");
    Ok((
        selected,
        TrainHistory {
            epochs: records,
            selected_epoch,
        },
    ))
}

/// Mean loss over a split without updating anything.
pub fn evaluate_loss(model: &Model, split: &DatasetSplit) -> Result<f64, TrainError> {
    check_compatible(model, split)?;
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let labels: Vec<usize> = chunk.iter().map(|&i| split.labels()[i]).collect();
        let tape = Tape::new();
        total += model.loss(&tape, &split.batch(chunk), &labels)?.value().item() * chunk.len() as f64;
    }
    Ok(total / split.len() as f64)
}
