use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    class_weights, seeded_rng, softmax_in_place, weighted_cross_entropy, ClassifierError, ClassifierModel,
    Evaluation, LabeledDataset,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    AdaptiveMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Leave the feature stage untouched.
    pub freeze_features: bool,
    /// Add a 180-degree rotated copy of every training image.
    pub augment_rotations: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::identification()
    }
}

impl TrainConfig {
    pub fn identification() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: 500,
            max_epochs: 10_000,
            optimizer: Optimizer::AdaptiveMoments,
            seed: 0,
            freeze_features: false,
            augment_rotations: true,
        }
    }

    pub fn crossing_detector() -> Self {
        Self {
            batch_size: 100,
            max_epochs: 100,
            optimizer: Optimizer::AdaptiveMoments,
            ..Self::identification()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Continue,
    Overfit,
    Plateau,
    Perfect,
    ZeroLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainOutcome {
    Stopped(StopReason),
    /// Reached `max_epochs` without a stopping condition.
    EpochCap,
    /// Loss or parameters became non-finite.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: TrainHistory,
    pub outcome: TrainOutcome,
    /// Validation metrics of the returned model.
    pub validation: Evaluation,
}

/// Epochs that must elapse before any stopping condition is considered.
const WARMUP_EPOCHS: usize = 10;

/// Decides whether training stops after the last epoch of `val_losses`.
///
/// `d_i = L_i - mean(L_{i-10} .. L_{i-1})` (1-based epochs). Checked in
/// order: zero loss, every class perfect on validation, `d > 0` over the
/// last five epochs, `|d| < 0.005 L`.
pub fn stopping_check(val_losses: &[f64], all_classes_perfect: bool) -> StopReason {
    let n = val_losses.len();
    if n <= WARMUP_EPOCHS {
        return StopReason::Continue;
    }
    let last = val_losses[n - 1];
    if last == 0.0 {
        return StopReason::ZeroLoss;
    }
    if all_classes_perfect {
        return StopReason::Perfect;
    }
    // d for the epoch at 0-based index k
    let d = |k: usize| -> Option<f64> {
        (k >= WARMUP_EPOCHS).then(|| {
            let prev = &val_losses[k - WARMUP_EPOCHS..k];
            val_losses[k] - prev.iter().sum::<f64>() / WARMUP_EPOCHS as f64
        })
    };
    if n >= 5 && (n - 5..n).all(|k| d(k).is_some_and(|v| v > 0.0)) {
        return StopReason::Overfit;
    }
    if let Some(dl) = d(n - 1) {
        if dl.abs() < 0.005 * last {
            return StopReason::Plateau;
        }
    }
    StopReason::Continue
}

/// Gradient buffers, same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Grads {
    pub fn zeros(m: &ClassifierModel) -> Self {
        Self {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }

    fn clear(&mut self) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

pub(crate) struct Workspace {
    hidden: Vec<f64>,
    out: Vec<f64>,
    delta_h: Vec<f64>,
}

impl Workspace {
    pub fn new(m: &ClassifierModel) -> Self {
        Self {
            hidden: vec![0.0; m.hidden],
            out: vec![0.0; m.n_classes],
            delta_h: vec![0.0; m.hidden],
        }
    }
}

/// Adds `scale * dLoss/dParams` of one item to `g` and returns its loss.
/// Returns `None` if the forward pass is not finite.
pub(crate) fn accumulate_item(
    m: &ClassifierModel,
    x: &[f64],
    label: usize,
    weight: f64,
    scale: f64,
    g: &mut Grads,
    ws: &mut Workspace,
    features: bool,
) -> Option<f64> {
    m.forward(x, &mut ws.hidden, &mut ws.out);
    if !ws.out.iter().all(|v| v.is_finite()) {
        return None;
    }
    softmax_in_place(&mut ws.out);
    let loss = weighted_cross_entropy(&ws.out, label, weight);
    // dL/dlogit = w (s - onehot)
    for (c, s) in ws.out.iter_mut().enumerate() {
        let t = if c == label { 1.0 } else { 0.0 };
        *s = weight * (*s - t) * scale;
    }
    let h = m.hidden;
    for c in 0..m.n_classes {
        let dc = ws.out[c];
        g.b2[c] += dc;
        let row = &mut g.w2[c * h..(c + 1) * h];
        for (gw, &hv) in row.iter_mut().zip(&ws.hidden) {
            *gw += dc * hv;
        }
    }
    if features {
        ws.delta_h.iter_mut().for_each(|d| *d = 0.0);
        for c in 0..m.n_classes {
            let dc = ws.out[c];
            let row = &m.w2[c * h..(c + 1) * h];
            for (d, &w) in ws.delta_h.iter_mut().zip(row) {
                *d += dc * w;
            }
        }
        let n_in = m.input_dim;
        for j in 0..h {
            if ws.hidden[j] <= 0.0 {
                continue;
            }
            let dj = ws.delta_h[j];
            g.b1[j] += dj;
            let row = &mut g.w1[j * n_in..(j + 1) * n_in];
            for (gw, &xv) in row.iter_mut().zip(x) {
                *gw += dj * xv;
            }
        }
    }
    Some(loss)
}

/// Mean weighted cross-entropy of `set` and its gradient with respect to
/// every parameter. `None` if a forward pass is not finite.
pub fn loss_gradient(model: &ClassifierModel, set: &LabeledDataset, weights: &[f64]) -> Option<(f64, Grads)> {
    let mut g = Grads::zeros(model);
    let mut ws = Workspace::new(model);
    let scale = 1.0 / set.len().max(1) as f64;
    let mut x = vec![0.0; model.input_dim];
    let mut loss = 0.0;
    for i in 0..set.len() {
        for (d, &s) in x.iter_mut().zip(set.item(i)) {
            *d = s as f64;
        }
        let label = set.labels[i];
        loss += accumulate_item(model, &x, label, weights[label], scale, &mut g, &mut ws, true)?;
    }
    Some((loss * scale, g))
}

struct AdamState {
    t: i32,
    m: Grads,
    v: Grads,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

fn sgd_step(p: &mut [f64], g: &[f64], lr: f64) {
    for (p, g) in p.iter_mut().zip(g) {
        *p -= lr * g;
    }
}

fn adam_step(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: i32) {
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..p.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + EPSILON);
    }
}

fn apply(model: &mut ClassifierModel, g: &Grads, cfg: &TrainConfig, adam: &mut Option<AdamState>) {
    let lr = cfg.learning_rate;
    match adam {
        None => {
            if !cfg.freeze_features {
                sgd_step(&mut model.w1, &g.w1, lr);
                sgd_step(&mut model.b1, &g.b1, lr);
            }
            sgd_step(&mut model.w2, &g.w2, lr);
            sgd_step(&mut model.b2, &g.b2, lr);
        }
        Some(st) => {
            st.t += 1;
            let t = st.t;
            if !cfg.freeze_features {
                adam_step(&mut model.w1, &g.w1, &mut st.m.w1, &mut st.v.w1, lr, t);
                adam_step(&mut model.b1, &g.b1, &mut st.m.b1, &mut st.v.b1, lr, t);
            }
            adam_step(&mut model.w2, &g.w2, &mut st.m.w2, &mut st.v.w2, lr, t);
            adam_step(&mut model.b2, &g.b2, &mut st.m.b2, &mut st.v.b2, lr, t);
        }
    }
}

fn params_finite(m: &ClassifierModel) -> bool {
    [&m.w1, &m.b1, &m.w2, &m.b2]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
}

/// Mini-batch training with class-weighted cross-entropy.
///
/// Class weights come from the training set counts. The model is updated in
/// place; on divergence it is left in its last (non-finite) state and the
/// caller decides what to do.
pub fn train(
    model: &mut ClassifierModel,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport, ClassifierError> {
    for set in [train_set, val_set] {
        if set.n_classes != model.n_classes {
            return Err(ClassifierError::ClassMismatch {
                dataset: set.n_classes,
                model: model.n_classes,
            });
        }
        if set.input_dim != model.input_dim {
            return Err(ClassifierError::InputSize {
                got: set.input_dim,
                expected: model.input_dim,
            });
        }
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ClassifierError::Empty);
    }
    let weights = class_weights(&train_set.class_counts());
    let mut items: Vec<(usize, bool)> = (0..train_set.len()).map(|i| (i, false)).collect();
    if cfg.augment_rotations {
        items.extend((0..train_set.len()).map(|i| (i, true)));
    }
    let mut rng = seeded_rng(cfg.seed, 4);
    let mut grads = Grads::zeros(model);
    let mut ws = Workspace::new(model);
    let mut adam = match cfg.optimizer {
        Optimizer::Sgd => None,
        Optimizer::AdaptiveMoments => Some(AdamState {
            t: 0,
            m: Grads::zeros(model),
            v: Grads::zeros(model),
        }),
    };
    let mut x = vec![0.0; model.input_dim];
    let mut history = TrainHistory::default();
    let batch = cfg.batch_size.max(1);
    let mut outcome = TrainOutcome::EpochCap;
    let mut validation = model.evaluate(val_set, &weights);
    for epoch in 1..=cfg.max_epochs {
        items.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut finite = true;
        for chunk in items.chunks(batch) {
            grads.clear();
            let scale = 1.0 / chunk.len() as f64;
            for &(i, rotated) in chunk {
                let src = train_set.item(i);
                if rotated {
                    for (d, &s) in x.iter_mut().zip(src.iter().rev()) {
                        *d = s as f64;
                    }
                } else {
                    for (d, &s) in x.iter_mut().zip(src) {
                        *d = s as f64;
                    }
                }
                let label = train_set.labels[i];
                match accumulate_item(
                    model,
                    &x,
                    label,
                    weights[label],
                    scale,
                    &mut grads,
                    &mut ws,
                    !cfg.freeze_features,
                ) {
                    Some(l) => loss_sum += l,
                    None => finite = false,
                }
            }
            if !finite {
                break;
            }
            apply(model, &grads, cfg, &mut adam);
        }
        if !finite || !params_finite(model) {
            outcome = TrainOutcome::Diverged;
            break;
        }
        validation = model.evaluate(val_set, &weights);
        let train_loss = loss_sum / items.len() as f64;
        if !train_loss.is_finite() || !validation.loss.is_finite() {
            outcome = TrainOutcome::Diverged;
            break;
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: validation.loss,
            val_accuracy: validation.accuracy,
        });
        let reason = stopping_check(&history.val_losses(), validation.all_classes_perfect());
        if reason != StopReason::Continue {
            outcome = TrainOutcome::Stopped(reason);
            break;
        }
    }
    Ok(TrainReport {
        history,
        outcome,
        validation,
    })
}
