//! MAE-loss training loop with Adam, early stopping, and the evaluation
//! metrics (MAE, Pearson correlation, Acc-7, Acc-2, F1).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{amb_forward, bind, AmbModel, FreezeMask, ModelError, ModelInput, ParameterSet};
use crate::pipeline::{collate_batch, PreparedSample};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, TensorError};
use crate::transformer::DropoutCfg;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("trainable parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("training aborted: non-finite loss {loss} in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
}

// ── MAE loss ───────────────────────────────────────────────────────────

/// Mean absolute error between two equal-length vectors on the tape.
pub fn mae_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    target: NodeId,
) -> Result<NodeId, TensorError> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(TensorError::ShapeMismatch {
            op: "mae_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

// ── Adam ───────────────────────────────────────────────────────────────

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        Self::with_lr(5e-5)
    }
}

/// Adam optimizer with bias correction. Moment buffers exist only for
/// trainable parameters; frozen parameters are never touched.
pub struct Adam<T: Scalar> {
    pub hp: AdamParams,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(hp: AdamParams) -> Self {
        Self {
            hp,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over every trainable parameter. Errors if
    /// a trainable parameter is missing its gradient buffer.
    pub fn step(
        &mut self,
        params: &mut ParameterSet<T>,
        mask: &FreezeMask,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let bc1 = 1.0 - self.hp.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.hp.beta2.powi(self.step as i32);
        let lr = T::from_f64(self.hp.lr);
        let beta1 = T::from_f64(self.hp.beta1);
        let beta2 = T::from_f64(self.hp.beta2);
        let one_m_beta1 = T::from_f64(1.0 - self.hp.beta1);
        let one_m_beta2 = T::from_f64(1.0 - self.hp.beta2);
        let eps = T::from_f64(self.hp.eps);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);

        for (name, trainable) in mask {
            if !*trainable {
                continue;
            }
            let tensor = params
                .get_mut(name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let n = tensor.numel();
            let grad = tensor
                .grad()
                .ok_or_else(|| TrainError::MissingGrad(name.clone()))?
                .to_vec();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = beta1 * m[i] + one_m_beta1 * g;
                v[i] = beta2 * v[i] + one_m_beta2 * g * g;
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Resets (allocating if needed) the gradient buffers of every trainable
/// parameter; frozen parameters keep no buffer.
pub fn zero_grads<T: Scalar>(params: &mut ParameterSet<T>, mask: &FreezeMask) {
    for (name, tensor) in params.iter_mut() {
        if mask.get(name).copied().unwrap_or(false) {
            tensor.zero_grad();
        } else {
            tensor.clear_grad();
        }
    }
}

// ── early stopping ─────────────────────────────────────────────────────

/// Patience-based early stopping on a minimized quantity.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    pub best: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub patience: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            patience,
        }
    }

    /// Observes one validation value; returns true when the value strictly
    /// improved on the best so far.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    /// Stops exactly when the epochs since improvement exceed the patience.
    pub fn should_stop(&self) -> bool {
        self.since_improvement > self.patience
    }
}

// ── evaluation metrics ─────────────────────────────────────────────────

/// Evaluation summary over one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub corr: f64,
    pub acc7: f64,
    pub acc2: f64,
    pub f1: f64,
    pub n: usize,
    /// Set when predictions (or labels) had zero variance and `corr` was
    /// reported as 0 instead of NaN.
    pub degenerate_corr: bool,
}

/// Rounds half away from zero, then clamps to the seven classes in [-3, 3].
pub fn seven_class(value: f64) -> i32 {
    (value.round() as i32).clamp(-3, 3)
}

/// Computes every metric from raw predictions and labels.
///
/// Acc-2 and F1 treat non-negative (>= 0) as the positive class; with
/// `exclude_zero`, samples whose label is exactly 0 are dropped from the
/// binary metrics (the alternative convention in the literature).
pub fn metrics_from(preds: &[f64], labels: &[f64], exclude_zero: bool) -> MetricsReport {
    assert_eq!(preds.len(), labels.len());
    let n = preds.len();
    let nf = n as f64;

    let mae = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / nf;

    let mean_p = preds.iter().sum::<f64>() / nf;
    let mean_y = labels.iter().sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_y = 0.0;
    for (p, y) in preds.iter().zip(labels) {
        let dp = p - mean_p;
        let dy = y - mean_y;
        cov += dp * dy;
        var_p += dp * dp;
        var_y += dy * dy;
    }
    let degenerate_corr = var_p == 0.0 || var_y == 0.0;
    let corr = if degenerate_corr {
        0.0
    } else {
        (cov / (var_p.sqrt() * var_y.sqrt())).clamp(-1.0, 1.0)
    };

    let acc7 = preds
        .iter()
        .zip(labels)
        .filter(|(p, y)| seven_class(**p) == seven_class(**y))
        .count() as f64
        / nf;

    let binary: Vec<(bool, bool)> = preds
        .iter()
        .zip(labels)
        .filter(|(_, y)| !(exclude_zero && **y == 0.0))
        .map(|(p, y)| (*p >= 0.0, *y >= 0.0))
        .collect();
    let nb = binary.len() as f64;
    let acc2 = if binary.is_empty() {
        0.0
    } else {
        binary.iter().filter(|(p, y)| p == y).count() as f64 / nb
    };
    let tp = binary.iter().filter(|(p, y)| *p && *y).count() as f64;
    let fp = binary.iter().filter(|(p, y)| *p && !*y).count() as f64;
    let fn_ = binary.iter().filter(|(p, y)| !*p && *y).count() as f64;
    let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };

    MetricsReport {
        mae,
        corr,
        acc7,
        acc2,
        f1,
        n,
        degenerate_corr,
    }
}

/// Inference predictions over a prepared set, in order.
pub fn predict_all<T: Scalar>(
    model: &AmbModel<T>,
    set: &[PreparedSample],
) -> Result<Vec<f64>, TrainError> {
    set.iter()
        .map(|s| Ok(model.predict(&ModelInput::from_prepared(s))?))
        .collect()
}

/// Evaluates a model on a prepared set with the default binary convention.
pub fn evaluate<T: Scalar>(
    model: &AmbModel<T>,
    set: &[PreparedSample],
) -> Result<MetricsReport, TrainError> {
    evaluate_with(model, set, false)
}

pub fn evaluate_with<T: Scalar>(
    model: &AmbModel<T>,
    set: &[PreparedSample],
    acc2_exclude_zero: bool,
) -> Result<MetricsReport, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let preds = predict_all(model, set)?;
    let labels: Vec<f64> = set.iter().map(|s| s.label as f64).collect();
    Ok(metrics_from(&preds, &labels, acc2_exclude_zero))
}

// ── training loop ──────────────────────────────────────────────────────

/// One row of the training history CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub dev_mae: f64,
    pub dev_corr: f64,
}

/// Result of a training run: the best parameters by dev MAE plus history.
#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub best_params: ParameterSet<T>,
    pub best_epoch: usize,
    pub best_dev_mae: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub steps: u64,
}

/// Renders history as CSV with a fixed header.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_mae,dev_mae,dev_corr\n");
    for rec in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            rec.epoch, rec.train_mae, rec.dev_mae, rec.dev_corr
        ));
    }
    out
}

/// Epoch loop: seeded shuffling into minibatches, forward, MAE loss,
/// backward, Adam; dev evaluation after every epoch; stops when the epochs
/// since the best dev MAE exceed the patience. The best checkpoint wins.
pub fn train<T: Scalar>(
    model: &mut AmbModel<T>,
    train_set: &[PreparedSample],
    dev_set: &[PreparedSample],
) -> Result<TrainOutcome<T>, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptySet("dev"));
    }
    let cfg = model.cfg.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(3);

    let mut adam = Adam::new(AdamParams::with_lr(cfg.lr));
    let mut stopper = EarlyStop::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch).enumerate() {
            let samples: Vec<PreparedSample> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let batch = collate_batch(&samples, cfg.max_len, cfg.max_frames);

            zero_grads(&mut model.params, &model.mask);
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &model.params);
            let mut preds = Vec::with_capacity(batch.items.len());
            for item in &batch.items {
                let input = ModelInput::from_batch_item(item);
                preds.push(amb_forward(
                    &cfg,
                    &mut tape,
                    &bound,
                    &input,
                    DropoutCfg {
                        p: cfg.dropout,
                        training: true,
                    },
                    &mut dropout_rng,
                )?);
            }
            let pred_vec = tape.concat_rows(&preds)?;
            let labels: Vec<T> = batch
                .items
                .iter()
                .map(|i| T::from_f64(i.label as f64))
                .collect();
            let label_node = tape.constant(labels, vec![batch.items.len(), 1])?;
            let loss = mae_loss(&mut tape, pred_vec, label_node)?;
            let loss_val = tape.value(loss).as_f64();
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss: loss_val,
                });
            }
            tape.backward(loss)?;
            bound.harvest(&tape, &mut model.params);
            adam.step(&mut model.params, &model.mask)?;

            loss_sum += loss_val * batch.items.len() as f64;
            seen += batch.items.len();
        }
        let train_mae = loss_sum / seen as f64;

        let dev = evaluate(model, dev_set)?;
        history.push(EpochRecord {
            epoch,
            train_mae,
            dev_mae: dev.mae,
            dev_corr: dev.corr,
        });
        if stopper.observe(epoch, dev.mae) {
            best_params = model.params.clone();
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        best_params,
        best_epoch: stopper.best_epoch,
        best_dev_mae: stopper.best,
        history,
        stopped_early,
        steps: adam.step_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AmbConfig, Mode};
    use crate::pipeline::{generate_synthetic, prepare, synthetic_vocabulary};
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    #[test]
    fn mae_loss_values_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(vec![1.0, 2.0], vec![2, 1], true).unwrap();
        let y = tape.constant(vec![1.0, 2.0], vec![2, 1]).unwrap();
        let l = mae_loss(&mut tape, p, y).unwrap();
        assert_eq!(tape.value(l), 0.0);

        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(vec![0.0], vec![1, 1], true).unwrap();
        let y = tape.constant(vec![3.0], vec![1, 1]).unwrap();
        let l = mae_loss(&mut tape, p, y).unwrap();
        assert_eq!(tape.value(l), 3.0);
        tape.backward(l).unwrap();
        // d mean|p - y| / dp = sign(p - y) / n = -1
        assert_eq!(tape.grad(p).unwrap(), &[-1.0]);

        // away from ties the loss gradient matches finite differences
        let p0 = vec![0.3, -1.2, 2.0];
        let y0 = vec![1.0, -0.5, 2.5];
        let eval = |xs: &[f64]| {
            let mut t = Tape::<f64>::new();
            let p = t.leaf(xs.to_vec(), vec![3, 1], false).unwrap();
            let y = t.constant(y0.clone(), vec![3, 1]).unwrap();
            let l = mae_loss(&mut t, p, y).unwrap();
            t.value(l)
        };
        let mut t = Tape::<f64>::new();
        let p = t.leaf(p0.clone(), vec![3, 1], true).unwrap();
        let y = t.constant(y0.clone(), vec![3, 1]).unwrap();
        let l = mae_loss(&mut t, p, y).unwrap();
        t.backward(l).unwrap();
        let fd = crate::gradcheck::central_diff(eval, &p0, 1e-6);
        let err = crate::gradcheck::max_rel_err(t.grad(p).unwrap(), &fd, 1e-9);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn mae_loss_length_mismatch() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(vec![0.0; 2], vec![2, 1]).unwrap();
        let y = tape.constant(vec![0.0; 3], vec![3, 1]).unwrap();
        assert!(mae_loss(&mut tape, p, y).is_err());
    }

    fn scalar_param<S: Scalar>(value: S) -> (ParameterSet<S>, FreezeMask) {
        let mut params = ParameterSet::new();
        let mut t = Tensor::new(vec![1], vec![value]).unwrap();
        t.set_requires_grad(true);
        params.insert("x".into(), t).unwrap();
        let mask: FreezeMask = [("x".to_string(), true)].into_iter().collect();
        (params, mask)
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let (mut params, mask) = scalar_param(0.0f64);
        params.get_mut("x").unwrap().zero_grad();
        params.get_mut("x").unwrap().accumulate_grad(&[1.0]);
        let hp = AdamParams::with_lr(0.01);
        let mut adam = Adam::new(hp);
        adam.step(&mut params, &mask).unwrap();
        let delta = params.get("x").unwrap().data()[0].abs();
        // exact first-step magnitude: lr * |g| / (|g| + eps)
        let expect = hp.lr * 1.0 / (1.0 + hp.eps);
        assert_relative_eq!(delta, expect, max_relative = 1e-9);
        assert_relative_eq!(delta, hp.lr, max_relative = 1e-6);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameter_unchanged() {
        let (mut params, mask) = scalar_param(0.7f32);
        params.get_mut("x").unwrap().zero_grad();
        let mut adam = Adam::new(AdamParams::with_lr(0.1));
        for _ in 0..3 {
            adam.step(&mut params, &mask).unwrap();
        }
        assert_eq!(params.get("x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn adam_missing_grad_is_contract_error() {
        let (mut params, mask) = scalar_param(0.0f32);
        let mut adam = Adam::new(AdamParams::default());
        let err = adam.step(&mut params, &mask).unwrap_err();
        assert!(matches!(err, TrainError::MissingGrad(name) if name == "x"));
    }

    #[test]
    fn adam_converges_on_scalar_abs() {
        // 100 steps on f(x) = |x - 2| from x = 0 at lr 0.1
        let (mut params, mask) = scalar_param(0.0f64);
        let mut adam = Adam::new(AdamParams::with_lr(0.1));
        for _ in 0..100 {
            let x = params.get("x").unwrap().data()[0];
            let g = if x > 2.0 {
                1.0
            } else if x < 2.0 {
                -1.0
            } else {
                0.0
            };
            params.get_mut("x").unwrap().zero_grad();
            params.get_mut("x").unwrap().accumulate_grad(&[g]);
            adam.step(&mut params, &mask).unwrap();
        }
        let x = params.get("x").unwrap().data()[0];
        assert!((x - 2.0).abs() < 0.15, "x = {x}");
    }

    #[test]
    fn adam_never_updates_frozen_parameters() {
        let mut params = ParameterSet::<f32>::new();
        let mut a = Tensor::new(vec![1], vec![1.0]).unwrap();
        a.set_requires_grad(true);
        params.insert("train.a".into(), a).unwrap();
        params
            .insert("frozen.b".into(), Tensor::new(vec![1], vec![2.0]).unwrap())
            .unwrap();
        let mask: FreezeMask = [
            ("train.a".to_string(), true),
            ("frozen.b".to_string(), false),
        ]
        .into_iter()
        .collect();
        let before = params.get("frozen.b").unwrap().data()[0].to_bits();
        params.get_mut("train.a").unwrap().zero_grad();
        params.get_mut("train.a").unwrap().accumulate_grad(&[0.5]);
        let mut adam = Adam::new(AdamParams::with_lr(0.1));
        adam.step(&mut params, &mask).unwrap();
        assert_eq!(params.get("frozen.b").unwrap().data()[0].to_bits(), before);
        assert_ne!(params.get("train.a").unwrap().data()[0], 1.0);
    }

    #[test]
    fn early_stop_patience_zero_stops_after_one_bad_epoch() {
        let mut s = EarlyStop::new(0);
        assert!(s.observe(0, 1.0));
        assert!(!s.should_stop());
        assert!(!s.observe(1, 2.0));
        assert!(s.should_stop());
        assert_eq!(s.best_epoch, 0);
    }

    #[test]
    fn early_stop_counts_reset_on_improvement() {
        let mut s = EarlyStop::new(2);
        s.observe(0, 1.0);
        s.observe(1, 1.5);
        s.observe(2, 1.4);
        assert!(!s.should_stop());
        s.observe(3, 0.9);
        assert_eq!(s.since_improvement, 0);
        s.observe(4, 1.0);
        s.observe(5, 1.0);
        assert!(!s.should_stop());
        s.observe(6, 1.0);
        assert!(s.should_stop());
    }

    #[test]
    fn metrics_on_perfect_predictions() {
        let m = metrics_from(&[1.0, -2.0, 0.5], &[1.0, -2.0, 0.5], false);
        assert_eq!(m.mae, 0.0);
        assert_relative_eq!(m.corr, 1.0, max_relative = 1e-12);
        assert_eq!(m.acc7, 1.0);
        assert_eq!(m.acc2, 1.0);
        assert_eq!(m.f1, 1.0);
        assert!(!m.degenerate_corr);
    }

    #[test]
    fn pearson_closed_form() {
        let m = metrics_from(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0], false);
        let expect = 9.0 / (2.0 * 21f64.sqrt());
        assert_relative_eq!(m.corr, expect, max_relative = 1e-12);
    }

    #[test]
    fn pearson_affine_invariance() {
        let preds = [0.3, -1.0, 2.0, 0.7, -0.2];
        let labels = [0.5, -0.8, 1.5, 0.9, 0.0];
        let base = metrics_from(&preds, &labels, false).corr;
        let scaled: Vec<f64> = preds.iter().map(|p| 2.5 * p + 0.7).collect();
        let m = metrics_from(&scaled, &labels, false);
        assert_relative_eq!(m.corr, base, max_relative = 1e-9);
    }

    #[test]
    fn seven_class_rounding_convention() {
        assert_eq!(seven_class(3.7), 3);
        assert_eq!(seven_class(-0.4), 0);
        assert_eq!(seven_class(0.5), 1);
        assert_eq!(seven_class(-0.5), -1);
        assert_eq!(seven_class(-3.9), -3);
    }

    #[test]
    fn acc7_degrades_by_exactly_one_over_n() {
        let labels = [1.0, -2.0, 0.0, 2.0];
        let mut preds = labels.to_vec();
        let full = metrics_from(&preds, &labels, false).acc7;
        assert_eq!(full, 1.0);
        preds[2] = 1.2; // rounds to 1, label rounds to 0
        let dropped = metrics_from(&preds, &labels, false).acc7;
        assert_relative_eq!(full - dropped, 0.25, max_relative = 1e-12);
    }

    #[test]
    fn zero_variance_predictions_flagged_not_nan() {
        let m = metrics_from(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0], false);
        assert!(m.degenerate_corr);
        assert_eq!(m.corr, 0.0);
        assert!(!m.corr.is_nan());
    }

    #[test]
    fn exclude_zero_drops_zero_labels_from_binary_metrics() {
        let preds = [1.0, -1.0, 0.4];
        let labels = [1.0, -1.0, 0.0];
        let with = metrics_from(&preds, &labels, false);
        let without = metrics_from(&preds, &labels, true);
        assert_eq!(with.acc2, 1.0);
        assert_eq!(without.acc2, 1.0);
        assert_eq!(with.n, 3);
        // the zero-label sample counts toward acc7 either way
        assert_eq!(without.acc7, with.acc7);
    }

    fn tiny_sets() -> (Vec<PreparedSample>, Vec<PreparedSample>) {
        let cfg = AmbConfig::toy();
        let vocab = synthetic_vocabulary();
        let train = prepare(&generate_synthetic(12, 5, &cfg), &vocab, &cfg).unwrap();
        let dev = prepare(&generate_synthetic(6, 6, &cfg), &vocab, &cfg).unwrap();
        (train, dev)
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, dev_set) = tiny_sets();
        let run = || {
            let mut cfg = AmbConfig::toy();
            cfg.epochs = 3;
            cfg.batch = 4;
            cfg.dropout = 0.1;
            let mut model = AmbModel::<f32>::new(cfg).unwrap();
            train(&mut model, &train_set, &dev_set).unwrap().history
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train_mae.to_bits(), y.train_mae.to_bits());
            assert_eq!(x.dev_mae.to_bits(), y.dev_mae.to_bits());
            assert_eq!(x.dev_corr.to_bits(), y.dev_corr.to_bits());
        }
    }

    #[test]
    fn frozen_tensors_bit_identical_after_steps() {
        let (train_set, dev_set) = tiny_sets();
        let mut cfg = AmbConfig::toy();
        cfg.epochs = 2;
        cfg.batch = 4;
        cfg.mode = Mode::Adapters;
        let mut model = AmbModel::<f32>::new(cfg).unwrap();
        let snapshot: Vec<(String, Vec<u32>)> = model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("backbone.") || n.starts_with("embedding."))
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let outcome = train(&mut model, &train_set, &dev_set).unwrap();
        assert!(outcome.steps >= 5);
        for (name, bits) in snapshot {
            let t = model.params.get(&name).unwrap();
            assert!(
                t.data().iter().map(|v| v.to_bits()).eq(bits.into_iter()),
                "{name} changed"
            );
            assert!(t.grad().is_none(), "{name} grew a grad buffer");
        }
    }

    #[test]
    fn non_finite_loss_aborts_naming_the_batch() {
        let (train_set, dev_set) = tiny_sets();
        let mut cfg = AmbConfig::toy();
        cfg.epochs = 1;
        cfg.batch = 4;
        let mut model = AmbModel::<f32>::new(cfg).unwrap();
        let poisoned = model.params.get_mut("predictor.b").unwrap();
        poisoned.data_mut()[0] = f32::NAN;
        let err = train(&mut model, &train_set, &dev_set).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { epoch, batch, .. } => {
                assert_eq!(epoch, 0);
                assert_eq!(batch, 0);
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn history_csv_header() {
        let csv = history_to_csv(&[EpochRecord {
            epoch: 0,
            train_mae: 1.5,
            dev_mae: 1.25,
            dev_corr: 0.5,
        }]);
        assert_eq!(csv, "epoch,train_mae,dev_mae,dev_corr\n0,1.5,1.25,0.5\n");
    }
}
