//! Mini-batch training loop with best-validation retention and early stopping.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{update_running_stats, Batch, Forward, HybridModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::text::EncodedSequence;

const SHUFFLE_STREAM: u64 = 10;
const DROPOUT_STREAM: u64 = 11;

/// Encoded examples with their labels for one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodedSet {
    pub seqs: Vec<EncodedSequence>,
    pub labels: Vec<usize>,
}

impl EncodedSet {
    pub fn new(seqs: Vec<EncodedSequence>, labels: Vec<usize>) -> Result<Self> {
        if seqs.len() != labels.len() {
            return Err(Error::shape("encoded set", &[seqs.len()], &[labels.len()]));
        }
        Ok(EncodedSet { seqs, labels })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let seqs: Vec<&EncodedSequence> = rows.iter().map(|&r| &self.seqs[r]).collect();
        let labels: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        Batch::from_sequences(&seqs, &labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: Option<usize>,
    /// Stop as soon as eval-mode train accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            patience: Some(5),
            target_train_accuracy: None,
            seed: 42,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch norm".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Eval-mode loss and accuracy over the whole training set.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Mean training-mode mini-batch loss (what the optimizer saw).
    pub fit_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were retained.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("history", e))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

/// Mini-batch row groups; a trailing singleton is merged into the previous
/// batch since training-mode batch norm needs two rows.
pub fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Eval-mode loss, accuracy and argmax predictions.
pub fn evaluate(model: &HybridModel, set: &EncodedSet, batch_size: usize) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate an empty set".into()));
    }
    let mut total = 0.0;
    let mut predictions = Vec::with_capacity(set.len());
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk)?;
        let mut f = Forward::new(&model.store, false, Rng::new(0));
        let out = model.forward(&mut f, &batch)?;
        let loss = model.loss(&mut f, &out, &batch.labels)?;
        total += f.tape.value(loss).item() * chunk.len() as f64;
        let probs = f.tape.value(out.probs);
        let c = probs.last_dim();
        predictions.extend(probs.data().chunks(c).map(argmax));
    }
    let correct = predictions.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        loss: total / set.len() as f64,
        accuracy: correct as f64 / set.len() as f64,
        predictions,
    })
}

/// Non-finite activations during training mean the parameters blew up.
fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch },
        e => e,
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place and leaves it holding the best parameters:
/// highest validation accuracy when a validation set is given, otherwise
/// highest train accuracy (earliest epoch wins ties).
pub fn train(model: &mut HybridModel, train_set: &EncodedSet, val_set: Option<&EncodedSet>, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Data("training needs at least 2 examples".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut shuffle = root.derive(SHUFFLE_STREAM);
    let dropout_root = root.derive(DROPOUT_STREAM);
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.store)?;
    let momentum = model.config.bn_momentum;

    let mut history = History::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle.shuffle(&mut order);
        let mut fit_total = 0.0;
        for rows in batches(&order, cfg.batch_size) {
            let batch = train_set.batch(&rows)?;
            model.store.zero_grad();
            let stats = {
                let mut f = Forward::new(&model.store, true, dropout_root.derive(step));
                let out = model.forward(&mut f, &batch).map_err(|e| diverged(e, epoch))?;
                let loss = model.loss(&mut f, &out, &batch.labels)?;
                let value = f.tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                fit_total += value * rows.len() as f64;
                let tape = std::mem::take(&mut f.tape);
                let stats = std::mem::take(&mut f.bn_stats);
                drop(f);
                tape.backward_into(loss, &mut model.store)?;
                stats
            };
            opt.step(&mut model.store)?;
            update_running_stats(&mut model.store, &stats, momentum);
            step += 1;
        }

        let tr = evaluate(model, train_set, cfg.batch_size).map_err(|e| diverged(e, epoch))?;
        let va = val_set
            .map(|v| evaluate(model, v, cfg.batch_size))
            .transpose()
            .map_err(|e| diverged(e, epoch))?;
        if !tr.loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            val_loss: va.as_ref().map(|e| e.loss),
            val_acc: va.as_ref().map(|e| e.accuracy),
            fit_loss: fit_total / train_set.len() as f64,
        });
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}{}",
            tr.loss,
            tr.accuracy,
            va.as_ref().map_or(String::new(), |e| format!(", val loss {:.4} acc {:.4}", e.loss, e.accuracy))
        );

        let score = va.as_ref().map_or(tr.accuracy, |e| e.accuracy);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.store.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }

        if cfg.target_train_accuracy.is_some_and(|t| tr.accuracy >= t) {
            history.stopped_early = epoch < cfg.epochs;
            // The epoch that hit the target is the one kept.
            best = Some((score, model.store.clone()));
            history.best_epoch = epoch;
            break;
        }
        if val_set.is_some() && cfg.patience.is_some_and(|p| since_best >= p) {
            history.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    if let Some((_, store)) = best {
        model.store.copy_values_from(&store)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..33).collect();
        let b = batches(&order, 16);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 17]);
        let b = batches(&(0..34).collect::<Vec<_>>(), 16);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 2]);
        assert_eq!(batches(&[0], 16), vec![vec![0]]);
    }

    fn toy(n: usize, seed: u64) -> EncodedSet {
        // Class is encoded by the first body token, so the task is separable.
        let mut rng = Rng::new(seed);
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 4;
            let mut ids = vec![2, 4 + y as u32];
            ids.extend((0..3).map(|_| 8 + rng.below(8) as u32));
            ids.push(3);
            ids.resize(8, 0);
            let mask = ids.iter().map(|&t| u8::from(t != 0)).collect();
            seqs.push(EncodedSequence { ids, mask, original_length: 6 });
            labels.push(y);
        }
        EncodedSet::new(seqs, labels).unwrap()
    }

    fn tiny_model(seed: u64) -> HybridModel {
        let mut c = ModelConfig::tiny(16, 8, 8);
        c.kernel_sizes = vec![2, 3];
        c.filters = 4;
        c.proj_dim = 8;
        c.hidden = 4;
        c.attn_dim = 4;
        c.dense_units = 8;
        HybridModel::new(c, seed).unwrap()
    }

    #[test]
    fn same_seed_same_history() {
        let data = toy(12, 1);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let run = || {
            let mut m = tiny_model(5);
            let h = train(&mut m, &data, Some(&data), &cfg).unwrap();
            (h, m.store.value(m.store.trainable_ids()[0]).clone())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1.to_jsonl(), h2.to_jsonl());
        assert_eq!(p1, p2);
        assert_eq!(h1.records.len(), 3);
    }

    #[test]
    fn zero_lr_and_decay_keeps_trainable_parameters() {
        let data = toy(8, 2);
        let mut m = tiny_model(3);
        let before = m.store.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            optimizer: AdamWConfig { lr: 0.0, weight_decay: 0.0, ..AdamWConfig::default() },
            ..TrainConfig::default()
        };
        train(&mut m, &data, None, &cfg).unwrap();
        for id in m.store.trainable_ids() {
            assert_eq!(m.store.value(id), before.value(id));
        }
    }

    #[test]
    fn history_lines_are_json_with_expected_keys() {
        let data = toy(8, 3);
        let mut m = tiny_model(1);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
        let h = train(&mut m, &data, Some(&data), &cfg).unwrap();
        let text = h.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"] {
                assert!(v.get(key).is_some(), "missing {key}");
            }
        }
    }

    #[test]
    fn best_validation_parameters_are_restored() {
        let data = toy(12, 4);
        let mut m = tiny_model(2);
        let cfg = TrainConfig { epochs: 4, batch_size: 4, patience: None, ..TrainConfig::default() };
        let h = train(&mut m, &data, Some(&data), &cfg).unwrap();
        let best = h.best().unwrap().val_acc.unwrap();
        assert!(h.records.iter().all(|r| r.val_acc.unwrap() <= best));
        let now = evaluate(&m, &data, 4).unwrap();
        assert_eq!(now.accuracy, best);
    }

    #[test]
    fn patience_stops_training() {
        let data = toy(8, 5);
        let mut m = tiny_model(4);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            patience: Some(2),
            optimizer: AdamWConfig { lr: 0.0, weight_decay: 0.0, ..AdamWConfig::default() },
            ..TrainConfig::default()
        };
        let h = train(&mut m, &data, Some(&data), &cfg).unwrap();
        assert!(h.stopped_early);
        assert!(h.records.len() < 50);
    }

    #[test]
    fn non_finite_parameters_report_divergence_epoch() {
        let data = toy(8, 6);
        let mut m = tiny_model(6);
        let id = m.store.id("head.out.b").unwrap();
        m.store.value_mut(id).data_mut()[0] = f64::NAN;
        let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
        assert!(matches!(train(&mut m, &data, None, &cfg), Err(Error::Diverged { epoch: 1 })));
    }
}
