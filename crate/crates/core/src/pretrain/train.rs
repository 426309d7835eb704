use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::data::{make_nsp_pairs, mask_tokens, Example, TokenBatch, IGNORE};
use super::distill::{kl_op, mse_op, total_loss, DistillTargets, LossFlags};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, SequenceInput};
use crate::numerics::{linear_warmup_schedule, AdamW, AdamWConfig, Matrix, ParamId, Tape};
use crate::quant::Mode;
use crate::rng::{indexed, Stream};

/// Env var capping worker threads.
pub const THREADS_ENV: &str = "BITFORMER_THREADS";

/// Thread pool sized by [`THREADS_ENV`] (default: all cores).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(vec![format!("thread pool: {e}")]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub temperature: f64,
    pub rep_weight: f64,
    pub logit_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            peak_lr: 2e-4,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            clip_norm: None,
            seed: 0,
            temperature: 1.0,
            rep_weight: 1.0,
            logit_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.steps as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be > 0".to_string());
        }
        if !(self.peak_lr >= 0.0) {
            errs.push("learning rate must be >= 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            errs.push(format!("warmup fraction ({}) must be in [0, 1]", self.warmup_frac));
        }
        if !(self.temperature > 0.0) {
            errs.push("temperature must be > 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_mlm: f64,
    pub loss_nsp: f64,
    pub loss_rep: f64,
    pub loss_logit: f64,
    pub total: f64,
    pub lr: f64,
    pub masked_acc: f64,
}

pub const METRICS_HEADER: &str = "step\tloss_mlm\tloss_nsp\tloss_rep\tloss_logit\tlr\tmasked_acc";

impl StepMetrics {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\t{:.4}",
            self.step, self.loss_mlm, self.loss_nsp, self.loss_rep, self.loss_logit, self.lr, self.masked_acc
        )
    }
}

struct SeqOut {
    grads: Vec<(ParamId, Matrix)>,
    mlm: f64,
    nsp: f64,
    rep: f64,
    logit: f64,
    correct: usize,
}

struct Weights {
    mlm: f64,
    nsp: f64,
    token: f64,
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

fn masked_correct(logits: &Matrix, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l != IGNORE && argmax(logits.row(i)) == l)
        .count()
}

#[allow(clippy::too_many_arguments)]
fn run_sequence(
    model: &Model,
    ex: &Example,
    teacher: Option<&DistillTargets>,
    w: &Weights,
    cfg: &TrainConfig,
    mode: Mode,
    dropout_rng: Option<rand_chacha::ChaCha8Rng>,
    backward: bool,
) -> Result<SeqOut> {
    let mut tape = Tape::new();
    let vars = model.record(&mut tape);
    let input = SequenceInput {
        tokens: &ex.tokens,
        segments: &ex.segments,
    };
    let mut opts = ForwardOptions {
        mode: Some(mode),
        mlm_positions: None,
        dropout_rng,
    };
    let out = model.forward_tape(&mut tape, &vars, &input, &mut opts)?;
    let mut terms = Vec::new();
    let targets = ex.num_targets();
    let mut mlm = 0.0;
    if targets > 0 {
        let ce = tape.cross_entropy(out.mlm_logits, &ex.labels, Some(IGNORE))?;
        let v = tape.scale(ce, targets as f64 * w.mlm);
        mlm = tape.scalar(v);
        terms.push(v);
    }
    let ce = tape.cross_entropy(out.nsp_logits, &[ex.is_next], None)?;
    let v = tape.scale(ce, w.nsp);
    let nsp = tape.scalar(v);
    terms.push(v);
    let (mut rep, mut logit) = (0.0, 0.0);
    if let Some(t) = teacher {
        if t.hidden.len() != out.hidden.len() {
            return Err(Error::Contract(format!(
                "teacher has {} hidden states, student {}",
                t.hidden.len(),
                out.hidden.len()
            )));
        }
        let n = ex.tokens.len() as f64;
        let kl = kl_op(&mut tape, out.mlm_logits, &t.logits, cfg.temperature)?;
        let kl = tape.scale(kl, n * w.token);
        logit = tape.scalar(kl);
        let mut acc = None;
        for (&h, th) in out.hidden.iter().zip(&t.hidden) {
            let m = mse_op(&mut tape, h, th)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, m)?,
                None => m,
            });
        }
        let r = tape.scale(
            acc.expect("at least the embedding layer"),
            n * w.token / out.hidden.len() as f64,
        );
        rep = tape.scalar(r);
        terms.push(tape.scale(r, cfg.rep_weight));
        terms.push(tape.scale(kl, cfg.logit_weight));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    if !tape.scalar(total).is_finite() {
        let tensor = tape
            .first_non_finite(Some(&model.params))
            .unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite { tensor });
    }
    let correct = masked_correct(tape.value(out.mlm_logits), &ex.labels);
    let grads = if backward {
        tape.backward(total)?.params().map(|(id, g)| (id, g.clone())).collect()
    } else {
        Vec::new()
    };
    Ok(SeqOut {
        grads,
        mlm,
        nsp,
        rep,
        logit,
        correct,
    })
}

fn teacher_targets(teacher: &Model, ex: &Example) -> Result<DistillTargets> {
    let r = teacher.forward(&ex.tokens, &ex.segments, Mode::Train)?;
    Ok(DistillTargets {
        logits: r.mlm_logits,
        hidden: r.hidden,
    })
}

/// Masked batch for `step`; each step has its own NSP and mask streams.
pub fn training_batch(
    corpus: &Corpus,
    vocab: usize,
    max_seq: usize,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<TokenBatch> {
    let pairs = make_nsp_pairs(corpus, batch_size, max_seq, &mut indexed(seed, Stream::Nsp, step))?;
    Ok(mask_tokens(&pairs, vocab, &mut indexed(seed, Stream::Mask, step)))
}

fn check_teacher(model: &Model, teacher: &Model) -> Result<()> {
    let (s, t) = (&model.config, &teacher.config);
    if s.layers != t.layers || s.hidden != t.hidden || s.vocab != t.vocab || s.max_seq < 3 {
        return Err(Error::Contract(format!(
            "teacher shape (layers {}, hidden {}, vocab {}) differs from student (layers {}, hidden {}, vocab {})",
            t.layers, t.hidden, t.vocab, s.layers, s.hidden, s.vocab
        )));
    }
    Ok(())
}

/// Pretrains `model` on MLM + NSP (+ distillation when a teacher is given).
///
/// Each step draws a fresh batch, runs one tape per sequence in parallel,
/// sums gradients in sequence order and takes one AdamW step. A metrics
/// line per step goes to `log` when given.
pub fn pretrain_loop(
    model: &mut Model,
    corpus: &Corpus,
    teacher: Option<&Model>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if let Some(t) = teacher {
        check_teacher(model, t)?;
    }
    let pool = thread_pool()?;
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        },
    );
    let flags = LossFlags {
        distill: teacher.is_some(),
    };
    let (vocab, max_seq) = (model.config.vocab, model.config.max_seq);
    let warmup = cfg.warmup_steps();
    if let Some(w) = log.as_mut() {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("metrics log", e))?;
    }
    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = training_batch(corpus, vocab, max_seq, cfg.batch_size, cfg.seed, step)?;
        if !model.calibrated {
            let inputs: Vec<SequenceInput> = batch
                .examples
                .iter()
                .map(|e| SequenceInput {
                    tokens: &e.tokens,
                    segments: &e.segments,
                })
                .collect();
            model.calibrate(&inputs)?;
        }
        let targets = batch.num_targets();
        let w = Weights {
            mlm: 1.0 / targets.max(1) as f64,
            nsp: 1.0 / batch.examples.len() as f64,
            token: 1.0 / batch.num_tokens() as f64,
        };
        let m: &Model = model;
        let outs: Vec<SeqOut> = pool.install(|| {
            batch
                .examples
                .par_iter()
                .enumerate()
                .map(|(i, ex)| {
                    let t = teacher.map(|t| teacher_targets(t, ex)).transpose()?;
                    let drop = indexed(cfg.seed, Stream::Dropout, step * cfg.batch_size as u64 + i as u64);
                    run_sequence(m, ex, t.as_ref(), &w, cfg, Mode::Train, Some(drop), true)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        model.params.zero_grads();
        let (mut mlm, mut nsp, mut rep, mut logit, mut correct) = (0.0, 0.0, 0.0, 0.0, 0);
        for o in &outs {
            for (id, g) in &o.grads {
                model.params.accumulate(*id, g)?;
            }
            mlm += o.mlm;
            nsp += o.nsp;
            rep += o.rep;
            logit += o.logit;
            correct += o.correct;
        }
        if let Some(c) = cfg.clip_norm {
            model.params.clip_grad_norm(c);
        }
        let lr = linear_warmup_schedule(step + 1, warmup, cfg.steps + 1, cfg.peak_lr)?;
        opt.step(&mut model.params, lr)?;
        if let Some(tensor) = model.params.first_non_finite() {
            return Err(Error::NonFinite { tensor });
        }
        let sm = StepMetrics {
            step,
            loss_mlm: mlm,
            loss_nsp: nsp,
            loss_rep: rep,
            loss_logit: logit,
            total: total_loss(mlm, nsp, rep, logit, flags),
            lr,
            masked_acc: correct as f64 / targets.max(1) as f64,
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", sm.tsv()).map_err(|e| Error::io("metrics log", e))?;
        }
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step}: mlm {:.4} nsp {:.4} acc {:.3} lr {lr:.2e}",
                sm.loss_mlm,
                sm.loss_nsp,
                sm.masked_acc
            );
        }
        metrics.push(sm);
    }
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss_mlm: f64,
    pub loss_nsp: f64,
    pub masked_acc: f64,
}

/// MLM/NSP loss on `batches` held-out batches drawn from streams that
/// training never touches; packed-kernel forward.
pub fn evaluate(model: &Model, corpus: &Corpus, batches: u64, batch_size: usize, seed: u64) -> Result<EvalMetrics> {
    let pool = thread_pool()?;
    let cfg = TrainConfig::default();
    let (mut mlm, mut nsp, mut correct, mut targets) = (0.0, 0.0, 0, 0);
    for b in 0..batches {
        let batch = training_batch(
            corpus,
            model.config.vocab,
            model.config.max_seq,
            batch_size,
            seed,
            u64::MAX - b,
        )?;
        let t = batch.num_targets();
        let w = Weights {
            mlm: 1.0 / t.max(1) as f64,
            nsp: 1.0 / batch.examples.len() as f64,
            token: 1.0 / batch.num_tokens() as f64,
        };
        let outs: Vec<SeqOut> = pool.install(|| {
            batch
                .examples
                .par_iter()
                .map(|ex| run_sequence(model, ex, None, &w, &cfg, Mode::Eval, None, false))
                .collect::<Result<Vec<_>>>()
        })?;
        mlm += outs.iter().map(|o| o.mlm).sum::<f64>();
        nsp += outs.iter().map(|o| o.nsp).sum::<f64>();
        correct += outs.iter().map(|o| o.correct).sum::<usize>();
        targets += t;
    }
    let n = batches.max(1) as f64;
    Ok(EvalMetrics {
        loss_mlm: mlm / n,
        loss_nsp: nsp / n,
        masked_acc: correct as f64 / targets.max(1) as f64,
    })
}
