//! Optimization loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::{gt_scores, metrics_from_scores, predicted_scores};
use crate::geo::FeatureMatrix;
use crate::loss::{combined_loss, LossConfig};
use crate::measures::GroundTruthMatrix;
use crate::model::{Batch, BnRunning, Mode, Model};

pub use crate::formats::{load_checkpoint, save_checkpoint, Checkpoint};

/// Batches smaller than this are dropped: the ranking term needs a few
/// members per list to say anything.
pub const MIN_BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            decay: 0.5,
            decay_every: 15,
            max_epochs: 40,
            batch_size: 128,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || self.decay_every == 0 {
            return bad("decay factor must be in (0, 1] and decay interval positive".into());
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return bad(format!(
                "need 0 < patience ({}) ≤ max epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size < MIN_BATCH {
            return bad(format!("batch size must be at least {MIN_BATCH}"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps be positive".into());
        }
        self.loss.validate()
    }
}

/// Step decay: `lr · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// First and second moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: crate::Scalar>(params: &[Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One bias-corrected update. `grads[i]` aligns with `params[i]`.
    pub fn update<T: crate::Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape("optimizer, parameter and gradient counts differ".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Shape(format!("gradient of length {} for parameter of {}", g.len(), p.len())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w = T::from_f64(w.as_f64() - lr * mh / (vh.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// Tracks the best validation score and says when patience has run out.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
        }
    }

    /// Records `score` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        let better = self.best.is_none_or(|b| score > b);
        if better {
            self.best = Some(score);
            self.best_epoch = epoch;
        }
        better
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.best_epoch + self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean combined loss over the epoch's batches.
    pub loss: f64,
    pub val_hr10: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.val_hr10 {
            Some(h) => write!(f, "{}\t{:.6}\t{:.6}", self.epoch, self.loss, h),
            None => write!(f, "{}\t{:.6}\tabsent", self.epoch, self.loss),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stop_reason: StopReason,
}

impl TrainReport {
    /// `epoch<TAB>loss<TAB>val_hr10` lines.
    pub fn log_text(&self) -> String {
        self.epochs.iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Normalized features of one split with its ground-truth matrix.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub features: &'a [FeatureMatrix],
    pub gt: &'a GroundTruthMatrix,
}

impl Split<'_> {
    fn check(&self, name: &str) -> Result<()> {
        if self.gt.n() != self.features.len() {
            return Err(Error::Shape(format!(
                "{name} ground truth covers {} trajectories, split has {}",
                self.gt.n(),
                self.features.len()
            )));
        }
        Ok(())
    }
}

/// Validation HR@10 in eval mode, `None` when the split is too small.
pub fn validation_hr10(model: &Model<f32>, val: &Split<'_>) -> Result<Option<f64>> {
    let refs: Vec<&FeatureMatrix> = val.features.iter().collect();
    let emb = model.embed_features(&refs, 256)?;
    let m = metrics_from_scores(&gt_scores(val.gt), &predicted_scores(&emb, &emb), emb.len())?;
    Ok(m.hr10)
}

/// One optimization step on the batch `idx`; returns the loss value.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam,
    train: &Split<'_>,
    idx: &[usize],
    lr: f64,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let feats: Vec<&FeatureMatrix> = idx.iter().map(|&i| &train.features[i]).collect();
    let batch = Batch::<f32>::from_features(&feats)?;
    let y: Vec<f64> = train.gt.submatrix(idx).values().iter().map(|&v| v as f64).collect();
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &batch, Mode::Train)?;
    let loss = combined_loss(&mut g, fwd.embeddings, &y, loss_cfg)?;
    let value = f64::from(g.value(loss.total).item());
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            value,
        });
    }
    let grads = g.backward(loss.total)?;
    let flat: Vec<Vec<f32>> = fwd
        .params
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    adam.update(model.params_mut().tensors_mut(), &flat, lr)?;
    model.apply_bn_stats(&fwd.bn_stats);
    Ok(value)
}

/// Trains `model` in place and leaves it holding the best weights seen.
/// `on_epoch` is called after every epoch.
pub fn fit(
    model: &mut Model<f32>,
    train: Split<'_>,
    val: Split<'_>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    train.check("training")?;
    val.check("validation")?;
    if train.features.len() < MIN_BATCH {
        return Err(Error::InvalidArgument(format!(
            "training split has {} trajectories, need at least {MIN_BATCH}",
            train.features.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params().tensors(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: (Vec<Tensor<f32>>, Vec<BnRunning<f32>>) = (model.params().tensors().to_vec(), model.bn_running().to_vec());
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.features.len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < MIN_BATCH {
                continue;
            }
            let loss = train_step(model, &mut adam, &train, idx, lr, &cfg.loss).map_err(|e| match e {
                Error::NonFiniteLoss { value, .. } => Error::NonFiniteLoss { epoch, batch: b, value },
                other => other,
            })?;
            total += loss;
            batches += 1;
        }
        let loss = total / batches.max(1) as f64;
        let val_hr10 = validation_hr10(model, &val)?;
        // Without a usable validation metric, fall back to the training loss.
        let score = val_hr10.unwrap_or(-loss);
        if stopper.observe(epoch, score) {
            best = (model.params().tensors().to_vec(), model.bn_running().to_vec());
        }
        let rec = EpochRecord { epoch, lr, loss, val_hr10 };
        on_epoch(&rec);
        epochs.push(rec);
        if stopper.should_stop(epoch) {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    model.load_state(best.0, best.1)?;
    Ok(TrainReport {
        epochs,
        best_epoch: stopper.best_epoch,
        best_score: stopper.best.unwrap_or(f64::NAN),
        stop_reason,
    })
}
