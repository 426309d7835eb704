use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{Tokenizer, CLS, SEP};
use super::train::thread_pool;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, SequenceInput};
use crate::numerics::{AdamW, AdamWConfig, Matrix, ParamId, Tape};
use crate::quant::Mode;
use crate::rng::{indexed, Stream};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub label: usize,
}

/// Frames each sentence as `[CLS] s [SEP]`, truncated to `max_seq`.
pub fn encode_labeled(tokenizer: &Tokenizer, data: &[(String, usize)], max_seq: usize) -> Vec<LabeledExample> {
    data.iter()
        .map(|(text, label)| {
            let mut tokens = vec![CLS];
            tokens.extend(tokenizer.encode(text).into_iter().take(max_seq.saturating_sub(2)));
            tokens.push(SEP);
            LabeledExample {
                segments: vec![0; tokens.len()],
                tokens,
                label: *label,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    pub classes: usize,
    pub seed: u64,
    /// Train only the classifier head.
    pub freeze_body: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            classes: 2,
            seed: 0,
            freeze_body: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub initial_test_acc: f64,
    pub epochs: Vec<EpochMetrics>,
    pub test_acc: f64,
}

fn check_labels(data: &[LabeledExample], classes: usize) -> Result<()> {
    match data.iter().find(|e| e.label >= classes) {
        Some(e) => Err(Error::Data(format!("label {} outside {classes} classes", e.label))),
        None => Ok(()),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Classifier predictions with packed kernels.
pub fn predict(model: &Model, data: &[LabeledExample]) -> Result<Vec<usize>> {
    if model.layout.classifier.is_none() {
        return Err(Error::Contract("model has no classifier head".into()));
    }
    let pool = thread_pool()?;
    pool.install(|| {
        data.par_iter()
            .map(|e| {
                let r = model.forward(&e.tokens, &e.segments, Mode::Eval)?;
                Ok(argmax(&r.cls_logits.expect("classifier attached")))
            })
            .collect()
    })
}

pub fn accuracy(model: &Model, data: &[LabeledExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let p = predict(model, data)?;
    Ok(p.iter().zip(data).filter(|(p, e)| **p == e.label).count() as f64 / data.len() as f64)
}

/// Adds a classifier on the first token and trains with a constant LR.
pub fn finetune(
    model: &mut Model,
    train: &[LabeledExample],
    test: &[LabeledExample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config(vec!["batch_size must be > 0".into()]));
    }
    check_labels(train, cfg.classes)?;
    check_labels(test, cfg.classes)?;
    if model.num_classes() != Some(cfg.classes) {
        model.attach_classifier(cfg.classes, cfg.seed)?;
    }
    if !model.calibrated {
        let inputs: Vec<SequenceInput> = train
            .iter()
            .take(cfg.batch_size)
            .map(|e| SequenceInput {
                tokens: &e.tokens,
                segments: &e.segments,
            })
            .collect();
        model.calibrate(&inputs)?;
    }
    let pool = thread_pool()?;
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let initial_test_acc = accuracy(model, test)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut indexed(cfg.seed, Stream::Shuffle, epoch as u64));
        let (mut loss, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let m: &Model = model;
            let scale = 1.0 / chunk.len() as f64;
            let outs: Vec<(Vec<(ParamId, Matrix)>, f64, bool)> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| {
                        let e = &train[i];
                        let mut tape = Tape::new();
                        let vars = m.record(&mut tape);
                        let input = SequenceInput {
                            tokens: &e.tokens,
                            segments: &e.segments,
                        };
                        let out = m.forward_tape(&mut tape, &vars, &input, &mut ForwardOptions::mode(Mode::Train))?;
                        let logits = out.cls_logits.expect("classifier attached");
                        let hit = argmax(tape.value(logits).row(0)) == e.label;
                        let ce = tape.cross_entropy(logits, &[e.label], None)?;
                        let l = tape.scale(ce, scale);
                        let g = tape.backward(l)?;
                        Ok((g.params().map(|(id, g)| (id, g.clone())).collect(), tape.scalar(l), hit))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            model.params.zero_grads();
            for (grads, l, hit) in &outs {
                for (id, g) in grads {
                    model.params.accumulate(*id, g)?;
                }
                loss += l;
                correct += *hit as usize;
            }
            if cfg.freeze_body {
                opt.step_where(&mut model.params, cfg.lr, |p| p.name.starts_with("heads.cls."))?;
            } else {
                opt.step(&mut model.params, cfg.lr)?;
            }
            if let Some(tensor) = model.params.first_non_finite() {
                return Err(Error::NonFinite { tensor });
            }
        }
        let batches = train.len().div_ceil(cfg.batch_size).max(1) as f64;
        let em = EpochMetrics {
            epoch,
            loss: loss / batches,
            train_acc: correct as f64 / train.len().max(1) as f64,
            test_acc: accuracy(model, test)?,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.3} test acc {:.3}",
            em.loss,
            em.train_acc,
            em.test_acc
        );
        epochs.push(em);
    }
    let test_acc = epochs.last().map_or(initial_test_acc, |e| e.test_acc);
    Ok(FinetuneReport {
        initial_test_acc,
        epochs,
        test_acc,
    })
}
