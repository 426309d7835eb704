//! The binary encoder: embeddings, attention + FFN blocks, heads, and the
//! checkpoint format.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_as, read_checkpoint, save_checkpoint, write_checkpoint, RawCheckpoint,
    CHECKPOINT_VERSION, MAGIC,
};
pub use config::{Granularity, ModelConfig, Variant};

use crate::binattn::{
    attention_block, linear, AttentionShape, AttentionVars, BinarizerVars, EstimatorVars, HeadVars, LinearVars,
    ResidualEstimators,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamKind, ParamStore, Tape, Var};
use crate::quant::{weight_op, Mode};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy)]
pub struct BinIds {
    pub alpha: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
    pub input: Option<BinIds>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub q: BinIds,
    pub k: BinIds,
    pub v: BinIds,
    pub att: BinIds,
}

#[derive(Debug, Clone, Copy)]
pub struct EstimatorIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_q_star: ParamId,
    pub w_k_star: ParamId,
    pub u_v_star: ParamId,
    pub v_v_star: ParamId,
}

impl EstimatorIds {
    pub fn all(&self) -> [ParamId; 6] {
        [
            self.w_q,
            self.w_k,
            self.w_q_star,
            self.w_k_star,
            self.u_v_star,
            self.v_v_star,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub out: LinearIds,
    pub heads: Vec<HeadIds>,
    pub estimators: Option<EstimatorIds>,
    pub ln1: (ParamId, ParamId),
    pub ffn_in: LinearIds,
    pub ffn_out: LinearIds,
    pub ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub emb_ln: (ParamId, ParamId),
    pub layers: Vec<LayerIds>,
    pub mlm: (ParamId, ParamId),
    pub nsp: (ParamId, ParamId),
    pub classifier: Option<(ParamId, ParamId)>,
}

/// Number of segment embeddings.
pub const SEGMENTS: usize = 2;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: Layout,
    /// Tokenizer vocabulary, stored alongside the weights (may be empty).
    pub vocab: Vec<String>,
    /// Whether activation binarizers have been fitted to data.
    pub calibrated: bool,
}

/// One input sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    pub tokens: &'a [usize],
    pub segments: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    /// `±α` binarizer input.
    Sign,
    /// Post-softmax map entering a `{0, α}` gate.
    Gate,
}

/// Where a binarizer read its input on a recorded forward.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub bin: BinIds,
    pub input: Var,
    pub kind: ProbeKind,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub mode: Option<Mode>,
    /// Rows for the MLM head; all positions when `None`.
    pub mlm_positions: Option<Vec<usize>>,
    /// Dropout stream; dropout runs only when set, in train mode, with p > 0.
    pub dropout_rng: Option<ChaCha8Rng>,
}

impl ForwardOptions {
    pub fn mode(mode: Mode) -> Self {
        Self {
            mode: Some(mode),
            ..Self::default()
        }
    }
}

/// Tape handles produced by one forward.
#[derive(Debug, Clone)]
pub struct TapeOutputs {
    /// Embedding output followed by every block output.
    pub hidden: Vec<Var>,
    pub mlm_logits: Var,
    pub nsp_logits: Var,
    pub cls_logits: Option<Var>,
    pub probes: Vec<Probe>,
}

/// Plain-value outputs of [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub hidden: Vec<Matrix>,
    /// `seq × vocab`
    pub mlm_logits: Matrix,
    pub nsp_logits: [f64; 2],
    pub cls_logits: Option<Vec<f64>>,
}

struct Builder<'a> {
    p: ParamStore,
    rng: ChaCha8Rng,
    config: &'a ModelConfig,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, kind: ParamKind, rows: usize, cols: usize) -> ParamId {
        let m = Matrix::random_normal(rows, cols, self.config.init_std, &mut self.rng);
        self.p.add(name, kind, m)
    }

    fn zeros(&mut self, name: String, kind: ParamKind, rows: usize, cols: usize) -> ParamId {
        self.p.add(name, kind, Matrix::zeros(rows, cols))
    }

    fn norm(&mut self, prefix: &str) -> (ParamId, ParamId) {
        let c = self.config.hidden;
        let g = self
            .p
            .add(format!("{prefix}.gamma"), ParamKind::Norm, Matrix::filled(1, c, 1.0));
        let b = self.zeros(format!("{prefix}.beta"), ParamKind::Norm, 1, c);
        (g, b)
    }

    fn binarizer(&mut self, prefix: &str) -> Option<BinIds> {
        if !self.config.variant.is_binary() {
            return None;
        }
        Some(BinIds {
            alpha: self
                .p
                .add(format!("{prefix}.alpha"), ParamKind::Scale, Matrix::scalar(1.0)),
            beta: self
                .p
                .add(format!("{prefix}.beta"), ParamKind::Shift, Matrix::scalar(0.0)),
        })
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize, input: Option<BinIds>) -> LinearIds {
        LinearIds {
            w: self.normal(format!("{prefix}.weight"), ParamKind::Weight, out, inp),
            b: self.zeros(format!("{prefix}.bias"), ParamKind::Bias, 1, out),
            input,
        }
    }
}

/// Builds a freshly initialized model; initialization depends only on the
/// config (including its seed).
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let c = config.hidden;
    let mut b = Builder {
        p: ParamStore::new(),
        rng: substream(config.seed, Stream::Init),
        config,
    };
    let mut est_rng = substream(config.seed, Stream::Estimator);
    let token = b.normal("embeddings.token".into(), ParamKind::Weight, config.vocab, c);
    let position = b.normal("embeddings.position".into(), ParamKind::Weight, config.max_seq, c);
    let segment = b.normal("embeddings.segment".into(), ParamKind::Weight, SEGMENTS, c);
    let emb_ln = b.norm("embeddings.norm");

    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let pre = format!("layer{l}");
        let input = b.binarizer(&format!("{pre}.attn.input"));
        let q = b.linear(&format!("{pre}.attn.query"), c, c, input);
        let k = b.linear(&format!("{pre}.attn.key"), c, c, input);
        let v = b.linear(&format!("{pre}.attn.value"), c, c, input);
        let mut heads = Vec::new();
        if config.variant.is_binary() {
            for h in 0..config.heads {
                let hp = format!("{pre}.attn.head{h}");
                heads.push(HeadIds {
                    q: b.binarizer(&format!("{hp}.query")).expect("binary"),
                    k: b.binarizer(&format!("{hp}.key")).expect("binary"),
                    v: b.binarizer(&format!("{hp}.value")).expect("binary"),
                    att: b.binarizer(&format!("{hp}.map")).expect("binary"),
                });
            }
        }
        let estimators = if config.variant.has_estimators() {
            let e = ResidualEstimators::from_weights(
                b.p.value(q.w),
                b.p.value(k.w),
                b.p.value(v.w),
                config.weight_granularity,
                config.rank,
                &mut est_rng,
            )?;
            let mut add =
                |name: &str, m: &Matrix| b.p.add(format!("{pre}.est.{name}"), ParamKind::Estimator, m.clone());
            Some(EstimatorIds {
                w_q: add("w_q", &e.w_q),
                w_k: add("w_k", &e.w_k),
                w_q_star: add("w_q_star", &e.w_q_star),
                w_k_star: add("w_k_star", &e.w_k_star),
                u_v_star: add("u_v_star", &e.u_v_star),
                v_v_star: add("v_v_star", &e.v_v_star),
            })
        } else {
            None
        };
        let out_in = b.binarizer(&format!("{pre}.attn.output.input"));
        let out = b.linear(&format!("{pre}.attn.output"), c, c, out_in);
        let ln1 = b.norm(&format!("{pre}.attn.norm"));
        let f_in = b.binarizer(&format!("{pre}.ffn.in.input"));
        let ffn_in = b.linear(&format!("{pre}.ffn.in"), config.ffn_dim, c, f_in);
        let f_out = b.binarizer(&format!("{pre}.ffn.out.input"));
        let ffn_out = b.linear(&format!("{pre}.ffn.out"), c, config.ffn_dim, f_out);
        let ln2 = b.norm(&format!("{pre}.ffn.norm"));
        layers.push(LayerIds {
            q,
            k,
            v,
            out,
            heads,
            estimators,
            ln1,
            ffn_in,
            ffn_out,
            ln2,
        });
    }
    let mlm = (
        b.normal("heads.mlm.weight".into(), ParamKind::Head, config.vocab, c),
        b.zeros("heads.mlm.bias".into(), ParamKind::Bias, 1, config.vocab),
    );
    let nsp = (
        b.normal("heads.nsp.weight".into(), ParamKind::Head, 2, c),
        b.zeros("heads.nsp.bias".into(), ParamKind::Bias, 1, 2),
    );
    Ok(Model {
        config: config.clone(),
        params: b.p,
        layout: Layout {
            token,
            position,
            segment,
            emb_ln,
            layers,
            mlm,
            nsp,
            classifier: None,
        },
        vocab: Vec::new(),
        calibrated: !config.variant.is_binary(),
    })
}

impl Model {
    /// Adds (or replaces) a full-precision classifier on the first token.
    pub fn attach_classifier(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(Error::Config(vec![format!(
                "classifier needs >= 2 classes, got {classes}"
            )]));
        }
        let c = self.config.hidden;
        let mut rng = substream(seed, Stream::Classifier);
        let w = Matrix::random_normal(classes, c, self.config.init_std, &mut rng);
        match self.layout.classifier {
            Some((wid, bid)) if self.params.value(wid).rows() == classes => {
                *self.params.value_mut(wid) = w;
                *self.params.value_mut(bid) = Matrix::zeros(1, classes);
            }
            Some(_) => {
                return Err(Error::Contract(
                    "classifier already attached with a different class count".into(),
                ))
            }
            None => {
                let wid = self.params.add("heads.cls.weight", ParamKind::Head, w);
                let bid = self
                    .params
                    .add("heads.cls.bias", ParamKind::Bias, Matrix::zeros(1, classes));
                self.layout.classifier = Some((wid, bid));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.layout.classifier.map(|(w, _)| self.params.value(w).rows())
    }

    /// Embedding + encoder parameters (heads excluded).
    pub fn backbone_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| !p.name.starts_with("heads."))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Records every parameter on the tape; index with `ParamId.0`.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| tape.param(&self.params, ParamId(i)))
            .collect()
    }

    fn check_input(&self, input: &SequenceInput) -> Result<()> {
        let n = input.tokens.len();
        if n == 0 {
            return Err(Error::Data("empty sequence".into()));
        }
        if n > self.config.max_seq {
            return Err(Error::Index {
                what: "sequence length",
                index: n,
                limit: self.config.max_seq,
            });
        }
        if input.segments.len() != n {
            return Err(Error::Data(format!(
                "{} segment ids for {n} tokens",
                input.segments.len()
            )));
        }
        if let Some(&t) = input.tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index {
                what: "token id",
                index: t,
                limit: self.config.vocab,
            });
        }
        if let Some(&s) = input.segments.iter().find(|&&s| s >= SEGMENTS) {
            return Err(Error::Index {
                what: "segment id",
                index: s,
                limit: SEGMENTS,
            });
        }
        Ok(())
    }

    fn embed_table(&self, tape: &mut Tape, table: Var, ids: &[usize], mode: Mode) -> Result<Var> {
        let rows = tape.gather_rows(table, ids)?;
        if self.config.variant.is_binary() {
            // per-row scale, so binarizing the gathered rows equals gathering binarized rows
            Ok(weight_op(tape, rows, Granularity::PerRow, mode))
        } else {
            Ok(rows)
        }
    }

    /// Records a forward pass on `tape`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: &SequenceInput,
        opts: &mut ForwardOptions,
    ) -> Result<TapeOutputs> {
        self.check_input(input)?;
        let mode = opts.mode.unwrap_or(Mode::Train);
        let cfg = &self.config;
        let lay = &self.layout;
        let n = input.tokens.len();
        let v = |id: ParamId| vars[id.0];
        let bz = |b: BinIds| BinarizerVars {
            alpha: vars[b.alpha.0],
            beta: vars[b.beta.0],
        };
        let lin = |l: &LinearIds| LinearVars {
            w: vars[l.w.0],
            b: vars[l.b.0],
            input: l.input.map(bz),
        };
        let mut probes = Vec::new();
        let dropout_p = if mode == Mode::Train { cfg.dropout } else { 0.0 };
        let mut drop = |tape: &mut Tape, x: Var| -> Result<Var> {
            match opts.dropout_rng.as_mut() {
                Some(rng) if dropout_p > 0.0 => {
                    let (r, c) = tape.value(x).shape();
                    let keep = 1.0 - dropout_p;
                    let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                    tape.dropout(x, mask)
                }
                _ => Ok(x),
            }
        };

        let positions: Vec<usize> = (0..n).collect();
        let tok = self.embed_table(tape, v(lay.token), input.tokens, mode)?;
        let pos = self.embed_table(tape, v(lay.position), &positions, mode)?;
        let seg = self.embed_table(tape, v(lay.segment), input.segments, mode)?;
        let e = tape.add(tok, pos)?;
        let e = tape.add(e, seg)?;
        let e = tape.layer_norm(e, v(lay.emb_ln.0), v(lay.emb_ln.1), cfg.layer_norm_eps)?;
        let mut x = drop(tape, e)?;
        let mut hidden = vec![x];

        for layer in &lay.layers {
            let vars_attn = AttentionVars {
                q: lin(&layer.q),
                k: lin(&layer.k),
                v: lin(&layer.v),
                out: lin(&layer.out),
                heads: layer
                    .heads
                    .iter()
                    .map(|h| HeadVars {
                        q: bz(h.q),
                        k: bz(h.k),
                        v: bz(h.v),
                        att: bz(h.att),
                    })
                    .collect(),
                estimators: layer.estimators.map(|e| EstimatorVars {
                    w_q: v(e.w_q),
                    w_k: v(e.w_k),
                    w_q_star: v(e.w_q_star),
                    w_k_star: v(e.w_k_star),
                    u_v_star: v(e.u_v_star),
                    v_v_star: v(e.v_v_star),
                }),
            };
            let shape = AttentionShape {
                heads: cfg.heads,
                head_dim: cfg.head_dim(),
                granularity: cfg.weight_granularity,
                kq: cfg.kq_enabled(),
                attv: cfg.attv_enabled(),
            };
            let trace = attention_block(tape, x, &vars_attn, &shape, mode)?;
            if let (Some(bi), Some(bo)) = (layer.q.input, layer.out.input) {
                let sign = |bin, input| Probe {
                    bin,
                    input,
                    kind: ProbeKind::Sign,
                };
                probes.push(sign(bi, x));
                for (ids, t) in layer.heads.iter().zip(&trace.heads) {
                    probes.push(sign(ids.q, t.q));
                    probes.push(sign(ids.k, t.k));
                    probes.push(sign(ids.v, t.v));
                    probes.push(Probe {
                        bin: ids.att,
                        input: t.map,
                        kind: ProbeKind::Gate,
                    });
                }
                probes.push(sign(bo, trace.context));
            }
            let attn = drop(tape, trace.out)?;
            let r = tape.add(x, attn)?;
            let h = tape.layer_norm(r, v(layer.ln1.0), v(layer.ln1.1), cfg.layer_norm_eps)?;

            let f = linear(tape, h, &lin(&layer.ffn_in), cfg.weight_granularity, mode)?;
            let g = tape.gelu(f);
            let f = linear(tape, g, &lin(&layer.ffn_out), cfg.weight_granularity, mode)?;
            if let (Some(bi), Some(bo)) = (layer.ffn_in.input, layer.ffn_out.input) {
                probes.push(Probe {
                    bin: bi,
                    input: h,
                    kind: ProbeKind::Sign,
                });
                probes.push(Probe {
                    bin: bo,
                    input: g,
                    kind: ProbeKind::Sign,
                });
            }
            let f = drop(tape, f)?;
            let r = tape.add(h, f)?;
            x = tape.layer_norm(r, v(layer.ln2.0), v(layer.ln2.1), cfg.layer_norm_eps)?;
            hidden.push(x);
        }

        let rows = match &opts.mlm_positions {
            Some(p) => tape.gather_rows(x, p)?,
            None => x,
        };
        let logits = tape.matmul_bt(rows, v(lay.mlm.0))?;
        let mlm_logits = tape.add_row(logits, v(lay.mlm.1))?;
        let first = tape.slice_rows(x, 0, 1)?;
        let nsp = tape.matmul_bt(first, v(lay.nsp.0))?;
        let nsp_logits = tape.add_row(nsp, v(lay.nsp.1))?;
        let cls_logits = match lay.classifier {
            Some((w, b)) => {
                let c = tape.matmul_bt(first, v(w))?;
                Some(tape.add_row(c, v(b))?)
            }
            None => None,
        };
        Ok(TapeOutputs {
            hidden,
            mlm_logits,
            nsp_logits,
            cls_logits,
            probes,
        })
    }

    /// Forward pass on plain values.
    pub fn forward(&self, tokens: &[usize], segments: &[usize], mode: Mode) -> Result<ForwardResult> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let out = self.forward_tape(
            &mut tape,
            &vars,
            &SequenceInput { tokens, segments },
            &mut ForwardOptions::mode(mode),
        )?;
        let nsp = tape.value(out.nsp_logits);
        Ok(ForwardResult {
            hidden: out.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
            mlm_logits: tape.value(out.mlm_logits).clone(),
            nsp_logits: [nsp[(0, 0)], nsp[(0, 1)]],
            cls_logits: out.cls_logits.map(|c| tape.value(c).row(0).to_vec()),
        })
    }

    /// Fits each activation binarizer to a batch: `±α` binarizers get
    /// `α = mean|a - β|`, attention gates get `α = 2 · mean(att)` so the
    /// gate opens on above-average entries. Several passes let downstream
    /// binarizers see calibrated upstream scales.
    pub fn calibrate(&mut self, batch: &[SequenceInput]) -> Result<()> {
        if !self.config.variant.is_binary() || batch.is_empty() {
            self.calibrated = true;
            return Ok(());
        }
        for _ in 0..4 {
            let mut stats: BTreeMap<ParamId, (f64, usize, ProbeKind, ParamId)> = BTreeMap::new();
            for seq in batch {
                let mut tape = Tape::new();
                let vars = self.record(&mut tape);
                let out = self.forward_tape(&mut tape, &vars, seq, &mut ForwardOptions::mode(Mode::Train))?;
                for p in &out.probes {
                    let beta = self.params.value(p.bin.beta)[(0, 0)];
                    let a = tape.value(p.input);
                    let s: f64 = match p.kind {
                        ProbeKind::Sign => a.data().iter().map(|x| (x - beta).abs()).sum(),
                        ProbeKind::Gate => a.sum(),
                    };
                    let e = stats.entry(p.bin.alpha).or_insert((0.0, 0, p.kind, p.bin.beta));
                    e.0 += s;
                    e.1 += a.len();
                }
            }
            for (alpha, (sum, count, kind, _)) in stats {
                let mean = sum / count.max(1) as f64;
                let value = match kind {
                    ProbeKind::Sign => mean,
                    ProbeKind::Gate => 2.0 * mean,
                };
                if value > 0.0 && value.is_finite() {
                    self.params.value_mut(alpha)[(0, 0)] = value;
                }
            }
        }
        self.calibrated = true;
        Ok(())
    }

    /// Plain-value estimator factors of layer `l`, if present.
    pub fn estimators(&self, l: usize) -> Option<ResidualEstimators> {
        let e = self.layout.layers.get(l)?.estimators?;
        let g = |id: ParamId| self.params.value(id).clone();
        Some(ResidualEstimators {
            rank: self.config.rank,
            w_q: g(e.w_q),
            w_k: g(e.w_k),
            w_q_star: g(e.w_q_star),
            w_k_star: g(e.w_k_star),
            u_v_star: g(e.u_v_star),
            v_v_star: g(e.v_v_star),
            kq_enabled: self.config.kq_enabled(),
            attv_enabled: self.config.attv_enabled(),
        })
    }

    /// Zeroes every estimator factor.
    pub fn zero_estimators(&mut self) {
        let ids: Vec<ParamId> = self
            .layout
            .layers
            .iter()
            .filter_map(|l| l.estimators)
            .flat_map(|e| e.all())
            .collect();
        for id in ids {
            self.params.value_mut(id).fill(0.0);
        }
    }
}
