//! Softmax classifier with a fully connected feature stage and a linear
//! classification stage, shared by the crossing detector and the identity
//! network.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use train::{
    loss_gradient, stopping_check, train, EpochRecord, Grads, Optimizer, StopReason, TrainConfig, TrainHistory, TrainOutcome,
    TrainReport,
};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hidden units of the feature stage.
pub const DEFAULT_HIDDEN: usize = 100;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("dataset has {0} items, at least 10 are needed for a train/validation split")]
    TooSmall(usize),
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} is out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("input has {got} values, model expects {expected}")]
    InputSize { got: usize, expected: usize },
    #[error("dataset has {dataset} classes, model has {model}")]
    ClassMismatch { dataset: usize, model: usize },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Deterministic generator for a given seed and independent stream.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Images (flattened, one row per item) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub input_dim: usize,
    pub n_classes: usize,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            n_classes,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, values: &[f32], label: usize) -> Result<(), ClassifierError> {
        if values.len() != self.input_dim {
            return Err(ClassifierError::InputSize {
                got: values.len(),
                expected: self.input_dim,
            });
        }
        if label >= self.n_classes {
            return Err(ClassifierError::LabelOutOfRange {
                label,
                n_classes: self.n_classes,
            });
        }
        self.data.extend_from_slice(values);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item(&self, i: usize) -> &[f32] {
        &self.data[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn subset(&self, idx: &[usize]) -> Self {
        let mut out = Self::new(self.input_dim, self.n_classes);
        out.data.reserve(idx.len() * self.input_dim);
        for &i in idx {
            out.data.extend_from_slice(self.item(i));
            out.labels.push(self.labels[i]);
        }
        out
    }
}

/// `w_i = 1 - |L_i| / sum_j |L_j|`.
pub fn class_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![1.0; counts.len()];
    }
    counts
        .iter()
        .map(|&c| 1.0 - c as f64 / total as f64)
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(activations: &[f64]) -> Vec<f64> {
    let mut out = activations.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(a: &mut [f64]) {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in a.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in a.iter_mut() {
        *v /= sum;
    }
}

/// `-w * ln(max(s_true, 1e-12))`.
pub fn weighted_cross_entropy(probabilities: &[f64], label: usize, weight: f64) -> f64 {
    -weight * probabilities[label].max(1e-12).ln()
}

/// Random 90/10 style split; the validation part is never empty.
pub fn split_train_val(
    dataset: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), ClassifierError> {
    use rand::seq::SliceRandom;
    let n = dataset.len();
    if n < 10 {
        return Err(ClassifierError::TooSmall(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, 1));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    Ok((dataset.subset(&idx[..n_train]), dataset.subset(&idx[n_train..])))
}

/// Mean loss and accuracies of a model on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Accuracy per class; classes absent from the set report 1.0.
    pub class_accuracy: Vec<f64>,
    pub class_present: Vec<bool>,
}

impl Evaluation {
    pub fn all_classes_perfect(&self) -> bool {
        self.class_accuracy.iter().all(|&a| a == 1.0)
    }
}

/// Two-layer perceptron: `x -> relu(W1 x + b1) -> W2 h + b2 -> softmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub input_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
    /// Feature stage.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Classification stage.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, out: &mut [f64]) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in out {
        *w = rng.random_range(-a..=a);
    }
}

#[inline]
pub(crate) fn dot(w: &[f64], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let wc = w.chunks_exact(4);
    let xc = x.chunks_exact(4);
    let (wr, xr) = (wc.remainder(), xc.remainder());
    for (a, b) in wc.zip(xc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (a, b) in wr.iter().zip(xr) {
        s += a * b;
    }
    s
}

impl ClassifierModel {
    pub fn new(input_dim: usize, hidden: usize, n_classes: usize, seed: u64) -> Self {
        let mut m = Self {
            input_dim,
            hidden,
            n_classes,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; n_classes * hidden],
            b2: vec![0.0; n_classes],
        };
        let mut rng = seeded_rng(seed, 2);
        xavier(&mut rng, input_dim, hidden, &mut m.w1);
        xavier(&mut rng, hidden, n_classes, &mut m.w2);
        m
    }

    /// Fresh classification stage; the feature stage is untouched.
    pub fn reinit_classification(&mut self, seed: u64) {
        let mut rng = seeded_rng(seed, 3);
        xavier(&mut rng, self.hidden, self.n_classes, &mut self.w2);
        self.b2.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Hidden activations and logits for an input already in f64.
    pub(crate) fn forward(&self, x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            let v = self.b1[j] + dot(row, x);
            // NaN must propagate so divergence is detectable
            *h = if v < 0.0 { 0.0 } else { v };
        }
        for (c, l) in logits.iter_mut().enumerate() {
            let row = &self.w2[c * self.hidden..(c + 1) * self.hidden];
            *l = self.b2[c] + dot(row, hidden);
        }
    }

    /// Softmax output for one input.
    pub fn predict(&self, x: &[f32]) -> Vec<f64> {
        let mut p = Predictor::new(self);
        p.predict(x).to_vec()
    }

    pub fn evaluate(&self, set: &LabeledDataset, weights: &[f64]) -> Evaluation {
        let mut pred = Predictor::new(self);
        let mut correct = vec![0usize; self.n_classes];
        let counts = set.class_counts();
        let mut loss = 0.0;
        let mut total_correct = 0;
        for i in 0..set.len() {
            let label = set.labels[i];
            let p = pred.predict(set.item(i));
            loss += weighted_cross_entropy(p, label, weights[label]);
            if argmax(p) == label {
                correct[label] += 1;
                total_correct += 1;
            }
        }
        let n = set.len().max(1) as f64;
        let class_accuracy = (0..self.n_classes)
            .map(|c| {
                if counts[c] == 0 {
                    1.0
                } else {
                    correct[c] as f64 / counts[c] as f64
                }
            })
            .collect();
        Evaluation {
            loss: loss / n,
            accuracy: total_correct as f64 / n,
            class_accuracy,
            class_present: counts.iter().map(|&c| c > 0).collect(),
        }
    }
}

/// Reusable buffers for repeated predictions with one model.
pub struct Predictor<'m> {
    model: &'m ClassifierModel,
    x: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl<'m> Predictor<'m> {
    pub fn new(model: &'m ClassifierModel) -> Self {
        Self {
            model,
            x: vec![0.0; model.input_dim],
            hidden: vec![0.0; model.hidden],
            out: vec![0.0; model.n_classes],
        }
    }

    pub fn predict(&mut self, x: &[f32]) -> &[f64] {
        assert_eq!(x.len(), self.model.input_dim, "input size");
        for (d, &s) in self.x.iter_mut().zip(x) {
            *d = s as f64;
        }
        self.model.forward(&self.x, &mut self.hidden, &mut self.out);
        softmax_in_place(&mut self.out);
        &self.out
    }
}

/// Index of the largest value; ties go to the highest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] >= v[best] {
            best = i;
        }
    }
    best
}
