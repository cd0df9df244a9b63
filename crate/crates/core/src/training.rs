//! SGD with momentum, the stair learning-rate schedule, segmentation metrics
//! and the training loop.

use std::fmt;

use rand::seq::SliceRandom;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Element, Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_start: usize,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub input_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 16,
            base_lr: 0.015,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_start: 100,
            lr_drop_every: 10,
            lr_drop_factor: 10.0,
            seed: 0,
            input_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("lr_drop_start", self.lr_drop_start),
            ("lr_drop_every", self.lr_drop_every),
            ("input_size", self.input_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.base_lr > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("base_lr must be positive, momentum and weight_decay non-negative"));
        }
        if !(self.lr_drop_factor > 1.0) {
            return Err(Error::config(format!("lr_drop_factor {} must exceed 1", self.lr_drop_factor)));
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::Usage(format!("epoch {epoch} outside 1..={}", cfg.epochs)));
    }
    if epoch <= cfg.lr_drop_start {
        return Ok(cfg.base_lr);
    }
    let drops = (epoch - cfg.lr_drop_start).div_ceil(cfg.lr_drop_every);
    Ok(cfg.base_lr / cfg.lr_drop_factor.powi(drops as i32))
}

/// One classical-momentum step with weight decay folded into the gradient:
/// `g' = g + wd·p`, `v ← μ·v + g'`, `p ← p − lr·v`.
pub fn sgd_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    velocity: &mut ParamStore<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::shape(format!("no gradient for {name}")))?;
        let v = velocity
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("no velocity for {name}")))?;
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape(format!(
                "{name}: parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = mu * *v + (g + wd * *p);
            *p = *p - lr * *v;
        }
    }
    Ok(())
}

/// Dataset-global confusion matrix; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.classes;
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if p as usize >= k || t as usize >= k {
                return Err(Error::Data(format!(
                    "pixel {i}: class id {} not below {k}",
                    p.max(t)
                )));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Metrics {
        let k = self.classes;
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..k).map(|c| self.count(c, c)).sum();
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let inter = self.count(c, c);
                let truth: u64 = (0..k).map(|p| self.count(c, p)).sum();
                let pred: u64 = (0..k).map(|t| self.count(t, c)).sum();
                let union = truth + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect();
        let included: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if included.is_empty() {
            0.0
        } else {
            included.iter().sum::<f64>() / included.len() as f64
        };
        Metrics {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class_iou,
            miou,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` for classes absent from both prediction and ground truth; those
    /// are left out of the mean.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ious: Vec<String> = self
            .per_class_iou
            .iter()
            .map(|v| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}")))
            .collect();
        write!(f, "acc={:.6} miou={:.6} iou=[{}]", self.accuracy, self.miou, ious.join(","))
    }
}

/// Per-pixel argmax over the class axis of `B×K×H×W` logits.
pub fn argmax_classes<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(b * plane);
    for n in 0..b {
        let base = n * k * plane;
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * plane + p] > d[base + best * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Stacks samples into a `B×3×S×S` batch and flat labels.
pub fn make_batch<T: Element>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let side = first.side();
    let mut data = Vec::with_capacity(samples.len() * 3 * side * side);
    let mut labels = Vec::with_capacity(samples.len() * side * side);
    for s in samples {
        if s.side() != side {
            return Err(Error::shape(format!("mixed sample sizes {side} and {}", s.side())));
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f64(f64::from(v))));
        labels.extend(s.mask.ids().iter().map(|&id| id as usize));
    }
    Ok((Tensor::new(vec![samples.len(), 3, side, side], data)?, labels))
}

pub fn evaluate<T: Element>(model: &Model<T>, samples: &[Sample], batch_size: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let mut confusion = Confusion::new(model.spec.num_classes);
    let refs: Vec<&Sample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, _) = make_batch::<T>(chunk)?;
        let pred = argmax_classes(&model.predict(&x)?);
        let truth: Vec<u8> = chunk.iter().flat_map(|s| s.mask.ids().iter().copied()).collect();
        confusion.add(&pred, &truth)?;
    }
    Ok(confusion.metrics())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val: Metrics,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={} loss={:.6} acc={:.6} miou={:.6}",
            self.epoch, self.lr, self.loss, self.val.accuracy, self.val.miou
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the highest validation mIoU.
    pub best: ParamStore<T>,
    pub best_epoch: usize,
    pub best_metrics: Metrics,
    pub log: Vec<EpochLog>,
}

/// Forward + backward on one batch; returns the loss and parameter gradients.
pub fn loss_and_grads<T: Element>(
    model: &Model<T>,
    x: Tensor<T>,
    labels: &[usize],
) -> Result<(f64, ParamStore<T>)> {
    let mut g = Graph::new();
    let input = g.constant(x);
    let (logits, bound) = model.forward(&mut g, input, true)?;
    let loss = g.softmax_ce(logits, labels)?;
    let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    g.backward(loss)?;
    Ok((value, bound.grads(&g, &model.params)))
}

/// Mini-batch SGD for `cfg.epochs` epochs. The callback sees each epoch's log
/// row as soon as it is available.
pub fn train<T: Element>(
    model: &mut Model<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage("training and validation sets must be nonempty".into()));
    }
    if cfg.batch_size > train_set.len() {
        return Err(Error::Usage(format!(
            "batch size {} exceeds {} training samples",
            cfg.batch_size,
            train_set.len()
        )));
    }
    let mut velocity = model.params.zeros_like();
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Metrics, ParamStore<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let batches = train_set.len() / cfg.batch_size;
        for b in 0..batches {
            let batch: Vec<&Sample> = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &train_set[i])
                .collect();
            let (x, labels) = make_batch(&batch)?;
            let (loss, grads) = loss_and_grads(model, x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Data(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            loss_sum += loss;
            sgd_step(&mut model.params, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
        }
        let val = evaluate(model, val_set, cfg.batch_size)?;
        let row = EpochLog {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            val,
        };
        on_epoch(&row);
        if best.as_ref().is_none_or(|(_, m, _)| row.val.miou > m.miou) {
            best = Some((epoch, row.val.clone(), model.params.clone()));
        }
        log.push(row);
    }
    let (best_epoch, best_metrics, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metrics,
        log,
    })
}
