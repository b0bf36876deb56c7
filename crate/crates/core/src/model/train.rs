use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Model;
use super::prepare::PreparedWindow;
use crate::autodiff::{AdamConfig, AdamState, Binder, ParamStore, Tape, Var};
use crate::embed::{apply_bn_updates, BnUpdate};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many epochs without a better validation loss, and
    /// restore the best parameters. Needs a validation set.
    pub patience: Option<usize>,
    /// Score the untrained model on the training set first.
    pub initial_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            patience: None,
            initial_loss: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub initial_loss: Option<f64>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

fn all_finite(store: &ParamStore) -> bool {
    store.ids().all(|id| store.get(id).is_finite())
}

/// Mean summed-window loss of a batch, batchnorm in training mode.
fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    binder: &mut Binder,
    windows: &[&PreparedWindow],
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let outs = model.forward(tape, binder, windows, true, false, updates)?;
    let mut losses = Vec::with_capacity(outs.len());
    for (o, w) in outs.iter().zip(windows) {
        losses.push(model.window_loss(tape, o, w)?);
    }
    let all = tape.concat(&losses, 0)?;
    let sum = tape.sum(all);
    Ok(tape.scale(sum, 1.0 / windows.len() as f64))
}

/// Mini-batch Adam on the mean summed-window loss. Batches follow a seeded
/// shuffle, so the run is a function of (model, data, config).
///
/// On a non-finite loss or update the model is left at its last good
/// parameters and `Error::Diverged` is returned.
pub fn train(
    model: &mut Model,
    train_set: &[PreparedWindow],
    val_set: &[PreparedWindow],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if cfg.patience.is_some() && val_set.is_empty() {
        return Err(Error::Config("early stopping needs a validation set".into()));
    }
    let mut report = TrainReport::default();
    if cfg.initial_loss {
        report.initial_loss = Some(model.mean_loss(train_set)?);
    }
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let windows: Vec<&PreparedWindow> = batch.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads, updates) = {
                let mut tape = Tape::new();
                let mut binder = Binder::new(&model.store, true);
                let mut updates = Vec::new();
                let diverged = |detail: String| Error::Diverged {
                    epoch,
                    batch: bi + 1,
                    detail,
                };
                let mean = match batch_loss(model, &mut tape, &mut binder, &windows, &mut updates) {
                    Err(Error::NonFinite(what)) => return Err(diverged(format!("non-finite {what}"))),
                    other => other?,
                };
                let loss = tape.value(mean).item();
                if !loss.is_finite() {
                    return Err(diverged(format!("loss is {loss}")));
                }
                match tape.backward(mean) {
                    Err(Error::NonFinite(what)) => return Err(diverged(format!("non-finite {what}"))),
                    other => other?,
                }
                (loss, binder.grads(&tape), updates)
            };
            let snapshot = model.store.clone();
            let step = adam.step(&mut model.store, &grads);
            apply_bn_updates(&mut model.store, &updates);
            if let Err(e) = step.and_then(|_| {
                if all_finite(&model.store) {
                    Ok(())
                } else {
                    Err(Error::NonFinite("parameters after update".into()))
                }
            }) {
                model.store = snapshot;
                return Err(Error::Diverged {
                    epoch,
                    batch: bi + 1,
                    detail: e.to_string(),
                });
            }
            total += loss * windows.len() as f64;
        }
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(model.mean_loss(val_set)?)
        };
        let log = EpochLog {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
        };
        on_epoch(&log);
        report.epochs.push(log);

        if let (Some(patience), Some(v)) = (cfg.patience, val_loss) {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.store.clone()));
                report.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(report)
}
