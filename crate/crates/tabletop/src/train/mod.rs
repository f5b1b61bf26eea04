//! Mini-batch training with RMSProp, stratified train/validation
//! splitting, best-validation checkpointing, and evaluation metrics.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointHeader, ParamInfo, TrainMeta, MAGIC};

use std::collections::BTreeMap;
use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AngleClass, ObjectKind, Sample};
use crate::error::{Error, Result};
use crate::nn::{softmax_xent, Mode, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    /// Reserved for gradient-check mode.
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Stop after the first epoch whose validation accuracy reaches this
    /// threshold. None trains the full epoch budget.
    #[serde(default)]
    pub early_stop_val_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            val_fraction: 0.1,
            seed: 0,
            precision: Precision::F32,
            early_stop_val_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0 < self.rmsprop_decay && self.rmsprop_decay < 1.0) {
            return Err(Error::Config(format!(
                "rmsprop_decay must be in (0,1), got {}",
                self.rmsprop_decay
            )));
        }
        if self.rmsprop_epsilon <= 0.0 {
            return Err(Error::Config("rmsprop_epsilon must be > 0".into()));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Per-parameter running mean-square accumulators, shapes mirroring the
/// parameters, initialized to zero.
pub struct OptimizerState<T> {
    accum: Vec<Tensor<T>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn for_network(net: &Network<T>) -> Self {
        OptimizerState {
            accum: net
                .parameters()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor<T>] {
        &self.accum
    }
}

/// One RMSProp update: `r <- rho*r + (1-rho)*g^2`,
/// `theta <- theta - lr * g / (sqrt(r) + eps)`, elementwise.
pub fn rmsprop_step<T: Float>(
    net: &mut Network<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
) -> Result<()> {
    let rho = T::from(config.rmsprop_decay).unwrap();
    let one_minus_rho = T::one() - rho;
    let lr = T::from(config.learning_rate).unwrap();
    let eps = T::from(config.rmsprop_epsilon).unwrap();

    let mut params = net.parameters_mut();
    if params.len() != grads.len() || params.len() != state.accum.len() {
        return Err(Error::Dim(format!(
            "rmsprop: {} parameters vs {} gradients vs {} accumulators",
            params.len(),
            grads.len(),
            state.accum.len()
        )));
    }
    for (((name, theta), grad), r) in params.iter_mut().zip(grads).zip(&mut state.accum) {
        if theta.shape() != grad.shape() {
            return Err(Error::Dim(format!(
                "rmsprop: gradient shape {:?} does not match parameter {name} {:?}",
                grad.shape(),
                theta.shape()
            )));
        }
        if !grad.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
        for ((t, &g), rv) in theta
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(r.data_mut())
        {
            *rv = rho * *rv + one_minus_rho * g * g;
            *t = *t - lr * g / (rv.sqrt() + eps);
        }
    }
    Ok(())
}

/// Stratified train/validation split over `(object, angle)` strata.
/// Returns disjoint, exhaustive index sets; deterministic under `seed`.
pub fn split_train_val(
    keys: &[(ObjectKind, AngleClass)],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must be in (0,1), got {val_fraction}"
        )));
    }
    let mut strata: BTreeMap<(ObjectKind, AngleClass), Vec<usize>> = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        strata.entry(*key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ((object, angle), mut indices) in strata {
        if indices.len() < 2 {
            return Err(Error::Config(format!(
                "stratum ({object}, {angle}) has {} sample(s); need at least 2",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let n = indices.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        val.extend_from_slice(&indices[..n_val]);
        train.extend_from_slice(&indices[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Which label a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// 3-way object recognition.
    Recognition,
    /// 8-way orientation classification.
    Angle,
}

impl Task {
    pub fn label_of(&self, sample: &Sample) -> usize {
        match self {
            Task::Recognition => sample.object.class_index(),
            Task::Angle => sample.angle.index(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Task::Recognition => 3,
            Task::Angle => 8,
        }
    }
}

/// One decoded training input and its class label.
#[derive(Debug, Clone)]
pub struct TrainItem<T> {
    pub input: Tensor<T>,
    pub label: usize,
}

pub fn items_for_task(samples: &[Sample], task: Task) -> Vec<TrainItem<f32>> {
    samples
        .iter()
        .map(|s| TrainItem {
            input: s.image.clone(),
            label: task.label_of(s),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Accuracy plus a per-class confusion matrix (`[true][predicted]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        self.confusion.iter().enumerate().map(|(i, row)| row[i]).sum()
    }
}

fn argmax<T: Float>(t: &Tensor<T>) -> usize {
    let mut best = 0;
    for (i, &v) in t.data().iter().enumerate() {
        if v > t.data()[best] {
            best = i;
        }
    }
    best
}

fn tally(pairs: impl IntoIterator<Item = (usize, usize)>, classes: usize) -> Evaluation {
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut total = 0usize;
    for (truth, pred) in pairs {
        confusion[truth][pred] += 1;
        total += 1;
    }
    let correct: usize = (0..classes).map(|i| confusion[i][i]).sum();
    Evaluation {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        confusion,
    }
}

/// Eval-mode accuracy and confusion matrix over `items`.
pub fn evaluate_network<T: Float>(
    net: &mut Network<T>,
    items: &[TrainItem<T>],
) -> Result<Evaluation> {
    let classes = net.spec().classes;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pairs = Vec::with_capacity(items.len());
    for item in items {
        if item.label >= classes {
            return Err(Error::Dim(format!(
                "label {} out of range for {classes} classes",
                item.label
            )));
        }
        let logits = net.forward(&item.input, Mode::Eval, &mut rng)?;
        pairs.push((item.label, argmax(&logits)));
    }
    Ok(tally(pairs, classes))
}

/// Evaluate a stored checkpoint.
pub fn evaluate(ckpt: &Checkpoint, items: &[TrainItem<f32>]) -> Result<Evaluation> {
    let mut net = ckpt.to_network()?;
    evaluate_network(&mut net, items)
}

/// Train `net` in place. Shuffles per epoch, evaluates validation
/// accuracy after each epoch, and returns the checkpoint with the
/// highest validation accuracy (earliest epoch wins ties) plus the
/// per-epoch history.
pub fn train<T: Float>(
    net: &mut Network<T>,
    train_items: &[TrainItem<T>],
    val_items: &[TrainItem<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_items.is_empty() || val_items.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let classes = net.spec().classes;
    if let Some(bad) = train_items
        .iter()
        .chain(val_items)
        .find(|it| it.label >= classes)
    {
        return Err(Error::Dim(format!(
            "label {} out of range for {classes} classes",
            bad.label
        )));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5u64 << 60));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xDu64 << 60));
    let mut opt_state = OptimizerState::for_network(net);
    let mut indices: Vec<usize> = (0..train_items.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 1..=config.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut batch_losses = Vec::new();
        let mut correct = 0usize;

        for (batch_idx, batch) in indices.chunks(config.batch_size).enumerate() {
            let mut grad_sum: Option<Vec<Tensor<T>>> = None;
            let mut loss_sum = 0.0f64;
            for &i in batch {
                let item = &train_items[i];
                let logits = net.forward(&item.input, Mode::Train, &mut dropout_rng)?;
                let (loss, _, dlogits) = softmax_xent(&logits, item.label).map_err(|e| {
                    Error::Numeric(format!("epoch {epoch} batch {batch_idx}: {e}"))
                })?;
                let loss = loss.to_f64().unwrap();
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training diverged at epoch {epoch} batch {batch_idx}: non-finite loss"
                    )));
                }
                loss_sum += loss;
                if argmax(&logits) == item.label {
                    correct += 1;
                }
                let grads = net.backward(&dlogits)?;
                grad_sum = Some(match grad_sum {
                    None => grads,
                    Some(acc) => acc
                        .into_iter()
                        .zip(grads)
                        .map(|(a, g)| a.zip(&g, |x, y| x + y))
                        .collect::<Result<_>>()?,
                });
            }
            let scale = T::from(1.0 / batch.len() as f64).unwrap();
            let grads: Vec<Tensor<T>> = grad_sum
                .expect("batch is nonempty")
                .into_iter()
                .map(|g| g.scale(scale))
                .collect();
            rmsprop_step(net, &grads, &mut opt_state, config).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("epoch {epoch} batch {batch_idx}: {msg}"))
                }
                other => other,
            })?;
            batch_losses.push(loss_sum / batch.len() as f64);
        }

        let val_acc = evaluate_network(net, val_items)?.accuracy;
        history.push(EpochStats {
            epoch,
            train_loss: batch_losses.iter().sum::<f64>() / batch_losses.len() as f64,
            train_acc: correct as f64 / train_items.len() as f64,
            val_acc,
        });

        let improved = best.as_ref().map_or(true, |(acc, _)| val_acc > *acc);
        if improved {
            let meta = TrainMeta {
                epoch,
                val_accuracy: val_acc,
                seed: config.seed,
                config: config.clone(),
            };
            best = Some((val_acc, Checkpoint::from_network(net, meta)));
        }

        if config
            .early_stop_val_acc
            .is_some_and(|threshold| val_acc >= threshold)
        {
            break;
        }
    }

    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran").1,
        history,
    })
}

/// Write the per-epoch history as `epoch,train_loss,train_acc,val_acc`.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    for row in history {
        writer
            .serialize(row)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
