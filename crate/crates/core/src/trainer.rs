//! Training loop.
//!
//! Per epoch: seeded shuffle and mini-batch optimization, writing each slot
//! instance's `r` into memory as it goes; an evaluation-mode pass over the
//! slot instances to reassign coefficients; dev evaluation. The best dev
//! epoch's model and memory are kept.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{CoefficientSource, KeyMode};
use crate::corpus::{expand_multilabel, Instance};
use crate::embedding::ContextualStore;
use crate::error::{Error, Result};
use crate::memory::{MemoryStore, SlotInfo};
use crate::metrics::EvalReport;
use crate::model::{Mode, Model, Prediction, PreparedInstance};
use crate::optim::Optimizer;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Fraction of memory slots predicted correctly in the coefficient pass.
    pub slot_accuracy: Option<f64>,
    pub keys_written: usize,
    pub dev_loss: Option<f64>,
    pub dev_accuracy: Option<f64>,
    pub dev_macro_f1: Option<f64>,
    pub best: bool,
}

/// Hooks for tests and progress reporting.
pub trait TrainObserver {
    fn key_written(&mut self, _epoch: usize, _slot: usize, _r: &[f64]) {}
    fn epoch_end(&mut self, _record: &EpochRecord, _memory: Option<&MemoryStore>) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub memory: Option<MemoryStore>,
    pub history: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Assigns a slot to each (expanded) training instance, subsampled by
/// `memory_fraction`, and builds the store. Fixed-key mode installs the
/// static keys here.
pub fn init_memory(model: &Model, train: &mut [PreparedInstance], originals: &[Instance]) -> Result<MemoryStore> {
    let cfg = &model.config;
    let n = train.len();
    let mut chosen: Vec<usize> = (0..n).collect();
    if cfg.memory_fraction < 1.0 {
        let keep = ((n as f64 * cfg.memory_fraction).round() as usize).clamp(1, n);
        chosen.shuffle(&mut rng::stream(cfg.seed, &[rng::SUBSAMPLE]));
        chosen.truncate(keep);
        chosen.sort_unstable();
    }
    let mut slots = Vec::with_capacity(chosen.len());
    for p in train.iter_mut() {
        p.slot = None;
    }
    for (s, &i) in chosen.iter().enumerate() {
        train[i].slot = Some(s);
        let inst = &originals[i];
        slots.push(SlotInfo {
            id: inst.id.clone(),
            relation: inst.relations[0],
            arg1: inst.arg1_text(),
            arg2: inst.arg2_text(),
        });
    }
    let mut memory = MemoryStore::init(slots, model.key_dim(), model.labels.num_relations(), cfg.seed)?;
    if cfg.key_mode == KeyMode::Fixed {
        let mut keys = Vec::with_capacity(chosen.len() * model.key_dim());
        for &i in &chosen {
            let k = train[i]
                .static_key
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("instance {} has no static key", train[i].id)))?;
            keys.extend_from_slice(k);
        }
        memory.install_fixed_keys(keys)?;
    }
    Ok(memory)
}

/// Evaluation-mode predictions and the report over `instances`.
pub fn evaluate(
    model: &Model,
    memory: Option<&MemoryStore>,
    instances: &[PreparedInstance],
) -> Result<(EvalReport, Vec<Prediction>)> {
    let refs: Vec<&PreparedInstance> = instances.iter().collect();
    let preds = model.predict(&refs, memory, 0, false)?;
    let gold: Vec<Vec<usize>> = instances.iter().map(|p| p.relations.clone()).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.relation).collect();
    Ok((EvalReport::compute(model.labels.num_relations(), &gold, &predicted)?, preds))
}

fn refresh_coefficients(model: &Model, memory: &mut MemoryStore, slot_instances: &[&PreparedInstance]) -> Result<f64> {
    let cfg = &model.config;
    let preds = model.predict(slot_instances, Some(memory), 0, cfg.exclude_self)?;
    let correct: Vec<bool> = slot_instances
        .iter()
        .zip(&preds)
        .map(|(inst, p)| {
            let r = match cfg.coefficient_source {
                CoefficientSource::Mixed => p.relation,
                CoefficientSource::Baseline => p.base_relation,
            };
            r == inst.relations[0]
        })
        .collect();
    memory.assign_coefficients(cfg.coefficient, &correct)?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// Mean `-ln` of the probability given to the most likely gold relation.
fn gold_loss(instances: &[PreparedInstance], preds: &[Prediction]) -> f64 {
    let total: f64 = instances
        .iter()
        .zip(preds)
        .map(|(inst, p)| {
            let best = inst.relations.iter().map(|&r| p.probabilities[r]).fold(0.0, f64::max);
            -best.max(f64::MIN_POSITIVE).ln()
        })
        .sum();
    total / instances.len() as f64
}

/// Trains `model` on `train` (expanded here), keeping the epoch with the
/// best dev accuracy, ties going to lower dev loss. Without a dev set the
/// last epoch is kept.
pub fn train(
    mut model: Model,
    train: &[Instance],
    dev: &[Instance],
    contextual: Option<&ContextualStore>,
    observer: &mut dyn TrainObserver,
) -> Result<Trained> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let cfg = model.config.clone();
    let originals = expand_multilabel(train);
    let mut prepared = model.prepare(&originals, contextual)?;
    let dev = model.prepare(dev, contextual)?;
    let mut memory = if cfg.uses_memory() {
        Some(init_memory(&model, &mut prepared, &originals)?)
    } else {
        None
    };
    let dynamic_keys = cfg.key_mode == KeyMode::Dynamic;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.params);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, f64, Model, Option<MemoryStore>)> = None;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        if let Some(m) = memory.as_mut() {
            m.begin_epoch();
        }
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut keys_written = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedInstance> = chunk.iter().map(|&i| &prepared[i]).collect();
            let out = model
                .batch_step(&batch, memory.as_ref(), Mode::Train { epoch, batch: b, positions: chunk })
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {msg}")),
                    other => other,
                })?;
            if !out.grads.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: non-finite gradient")));
            }
            optimizer.step(&mut model.params, &out.grads);
            loss_sum += out.loss * batch.len() as f64;
            if let (Some(m), true, false) = (memory.as_mut(), dynamic_keys, cfg.clean_key_pass) {
                let d = m.key_dim();
                for (k, inst) in batch.iter().enumerate() {
                    if let Some(slot) = inst.slot {
                        let r = &out.reps[k * d..(k + 1) * d];
                        m.update_key(slot, r)?;
                        observer.key_written(epoch, slot, r);
                        keys_written += 1;
                    }
                }
            }
        }

        let mut slot_accuracy = None;
        if let Some(m) = memory.as_mut() {
            let slot_instances: Vec<&PreparedInstance> = {
                let mut v: Vec<&PreparedInstance> = prepared.iter().filter(|p| p.slot.is_some()).collect();
                v.sort_by_key(|p| p.slot);
                v
            };
            if dynamic_keys && cfg.clean_key_pass {
                let d = m.key_dim();
                for chunk in slot_instances.chunks(64) {
                    let reps = model.represent(chunk)?;
                    for (k, inst) in chunk.iter().enumerate() {
                        let slot = inst.slot.expect("slot instances only");
                        let r = &reps[k * d..(k + 1) * d];
                        m.update_key(slot, r)?;
                        observer.key_written(epoch, slot, r);
                        keys_written += 1;
                    }
                }
            }
            slot_accuracy = Some(refresh_coefficients(&model, m, &slot_instances)?);
        }

        let dev_eval = if dev.is_empty() {
            None
        } else {
            let (report, preds) = evaluate(&model, memory.as_ref(), &dev)?;
            Some((report, gold_loss(&dev, &preds)))
        };
        // Snapshot order: dev accuracy, then lower dev loss. Patience only
        // counts epochs without an accuracy gain.
        let (improved, accuracy_gain) = match (&best, &dev_eval) {
            (None, _) | (_, None) => (true, true),
            (Some((acc, loss, ..)), Some((r, l))) => {
                (r.accuracy > *acc || (r.accuracy == *acc && l < loss), r.accuracy > *acc)
            }
        };
        if improved {
            let (acc, loss) = dev_eval.as_ref().map_or((f64::INFINITY, 0.0), |(r, l)| (r.accuracy, *l));
            best = Some((acc, loss, model.clone(), memory.clone()));
            best_epoch = epoch;
        }
        if accuracy_gain {
            stale = 0;
        } else {
            stale += 1;
        }
        let dev_report = dev_eval.as_ref().map(|(r, _)| r);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / prepared.len() as f64,
            slot_accuracy,
            keys_written,
            dev_loss: dev_eval.as_ref().map(|(_, l)| *l),
            dev_accuracy: dev_report.map(|r| r.accuracy),
            dev_macro_f1: dev_report.map(|r| r.macro_f1),
            best: improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev {:?}",
            record.train_loss,
            record.dev_accuracy
        );
        observer.epoch_end(&record, memory.as_ref());
        history.push(record);
        if dev_report.is_some() && stale >= cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }

    let (model, memory) = match best {
        Some((_, _, m, mem)) => (m, mem),
        None => (model, memory),
    };
    Ok(Trained {
        model,
        memory,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ResponseMode, TrainConfig};
    use crate::corpus::synth::generate_synthetic;

    fn tiny() -> TrainConfig {
        TrainConfig {
            word_dim: 6,
            subword_dim: 0,
            pad_length: 6,
            layers: 1,
            hidden: 8,
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    #[derive(Default)]
    struct Counter {
        writes: Vec<(usize, usize)>,
        hashes: Vec<Vec<u64>>,
    }

    impl TrainObserver for Counter {
        fn key_written(&mut self, epoch: usize, slot: usize, _r: &[f64]) {
            self.writes.push((epoch, slot));
        }
        fn epoch_end(&mut self, _: &EpochRecord, memory: Option<&MemoryStore>) {
            let m = memory.unwrap();
            self.hashes.push((0..m.len()).map(|i| m.key_hash(i)).collect());
        }
    }

    #[test]
    fn one_epoch_writes_every_key_once() {
        let c = generate_synthetic(10, 4, 3, 5).unwrap();
        let cfg = TrainConfig { epochs: 1, ..tiny() };
        let model = Model::build(cfg, c.labels.clone(), &c.train, None, 0).unwrap();
        let mut obs = Counter::default();
        let t = train(model, &c.train, &c.test, None, &mut obs).unwrap();
        let mut slots: Vec<usize> = obs.writes.iter().map(|w| w.1).collect();
        slots.sort_unstable();
        assert_eq!(slots, (0..10).collect::<Vec<_>>());
        let mem = t.memory.unwrap();
        assert!(mem.corrupted_slots().is_empty());
        assert!((0..10).all(|i| mem.written_this_epoch(i)));
    }

    #[test]
    fn repeated_runs_match() {
        let c = generate_synthetic(16, 8, 3, 6).unwrap();
        let run = || {
            let model = Model::build(tiny(), c.labels.clone(), &c.train, None, 0).unwrap();
            train(model, &c.train, &c.test, None, &mut NoObserver).unwrap().history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn baseline_skips_memory_and_matches_lambda_zero() {
        let c = generate_synthetic(16, 8, 3, 7).unwrap();
        let base_cfg = TrainConfig {
            response: ResponseMode::Baseline,
            ..tiny()
        };
        let zero_cfg = TrainConfig { lambda: 0.0, ..tiny() };
        let base = Model::build(base_cfg, c.labels.clone(), &c.train, None, 0).unwrap();
        let zero = Model::build(zero_cfg, c.labels.clone(), &c.train, None, 0).unwrap();
        let a = train(base, &c.train, &c.test, None, &mut NoObserver).unwrap();
        let b = train(zero, &c.train, &c.test, None, &mut NoObserver).unwrap();
        assert!(a.memory.is_none());
        let dev = |h: &[EpochRecord]| h.iter().map(|r| r.dev_accuracy).collect::<Vec<_>>();
        assert_eq!(dev(&a.history), dev(&b.history));
        let loss = |h: &[EpochRecord]| h.iter().map(|r| r.train_loss).collect::<Vec<_>>();
        assert_eq!(loss(&a.history), loss(&b.history));
    }

    #[test]
    fn memory_fraction_subsamples_slots() {
        let c = generate_synthetic(20, 0, 3, 8).unwrap();
        let cfg = TrainConfig {
            memory_fraction: 0.5,
            ..tiny()
        };
        let model = Model::build(cfg, c.labels.clone(), &c.train, None, 0).unwrap();
        let mut prepared = model.prepare(&c.train, None).unwrap();
        let mem = init_memory(&model, &mut prepared, &c.train).unwrap();
        assert_eq!(mem.len(), 10);
        assert_eq!(prepared.iter().filter(|p| p.slot.is_some()).count(), 10);
    }
}
