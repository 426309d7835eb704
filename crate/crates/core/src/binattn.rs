//! Binary self-attention and the low-rank residual estimators.
//!
//! Scores are `Q_B K_Bᵀ` of elastic-binarized per-head queries and keys. The
//! optional score estimator adds the rank-r approximation of the lost cross
//! terms, computed once per layer from the full-precision block input `A`:
//!
//! ```text
//! R = (A w_q)(A w_k*)ᵀ + (A w_q*)(A w_k)ᵀ + (A w_q*)(A w_k*)ᵀ
//! ```
//!
//! The map is softmaxed, gated to `{0, α}`, and multiplied with the binarized
//! values. The value-path estimator adds `Att_B (A u) v_hᵀ`, where `v_h` is
//! the head's block of rows of `v_v_star`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bitkernel::{binary_gemm, pack_signs, ternary_binary_gemm};
use crate::error::{Error, Result};
use crate::model::Granularity;
use crate::numerics::ops::{matmul, matmul_at, matmul_bt};
use crate::numerics::{CustomOp, Matrix, Tape, Var};
use crate::quant::{
    attention_backward, attention_bits, attention_op, binarize_weight, binary_linear, elastic_backward, hardtanh, sign,
    ElasticBinarizer, Level, Mode,
};

/// Low-rank factors for one attention layer. All matrices are `C × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEstimators {
    pub rank: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_q_star: Matrix,
    pub w_k_star: Matrix,
    pub u_v_star: Matrix,
    pub v_v_star: Matrix,
    pub kq_enabled: bool,
    pub attv_enabled: bool,
}

impl ResidualEstimators {
    pub fn zeros(hidden: usize, rank: usize, kq_enabled: bool, attv_enabled: bool) -> Self {
        let z = || Matrix::zeros(hidden, rank);
        Self {
            rank,
            w_q: z(),
            w_k: z(),
            w_q_star: z(),
            w_k_star: z(),
            u_v_star: z(),
            v_v_star: z(),
            kq_enabled,
            attv_enabled,
        }
    }

    /// Rank-r factors from truncated power iteration.
    ///
    /// Weights are `out × in`, so a projection is `A Wᵀ`. Unstarred factors
    /// approximate the binarized `W_Bᵀ`, starred ones the residual `W*ᵀ`;
    /// each is `U_r Σ_r`. The value pair is `u = U_r Σ_r`, `v = V_r`.
    pub fn from_weights<R: Rng + ?Sized>(
        w_q: &Matrix,
        w_k: &Matrix,
        w_v: &Matrix,
        granularity: Granularity,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let split = |w: &Matrix| -> Result<(Matrix, Matrix)> {
            let wb = binarize_weight(w, granularity).values;
            let star = crate::quant::residual(w, &wb)?;
            Ok((wb, star))
        };
        let (qb, qs) = split(w_q)?;
        let (kb, ks) = split(w_k)?;
        let (_, vs) = split(w_v)?;
        let (u_v_star, v_v_star) = low_rank(&vs, rank, rng);
        Ok(Self {
            rank,
            w_q: low_rank(&qb, rank, rng).0,
            w_k: low_rank(&kb, rank, rng).0,
            w_q_star: low_rank(&qs, rank, rng).0,
            w_k_star: low_rank(&ks, rank, rng).0,
            u_v_star,
            v_v_star,
            kq_enabled: true,
            attv_enabled: true,
        })
    }

    pub fn factors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_q_star", &self.w_q_star),
            ("w_k_star", &self.w_k_star),
            ("u_v_star", &self.u_v_star),
            ("v_v_star", &self.v_v_star),
        ]
    }
}

/// For `w` (`out × in`) returns `(Wᵀ V_r, V_r)` with `V_r` the top-r right
/// singular vectors of `Wᵀ`, found by block power iteration on `W Wᵀ`.
pub fn low_rank<R: Rng + ?Sized>(w: &Matrix, rank: usize, rng: &mut R) -> (Matrix, Matrix) {
    let out = w.rows();
    let mut v = Matrix::from_fn(out, rank, |_, _| StandardNormal.sample(rng));
    orthonormalize(&mut v);
    let gram = matmul_bt(w, w).expect("square gram");
    for _ in 0..64 {
        v = matmul(&gram, &v).expect("gram · v");
        orthonormalize(&mut v);
    }
    let u = matmul_at(w, &v).expect("wᵀ · v");
    (u, v)
}

/// Modified Gram-Schmidt over columns; degenerate columns become zero.
fn orthonormalize(m: &mut Matrix) {
    let (rows, cols) = m.shape();
    for j in 0..cols {
        for p in 0..j {
            let d: f64 = (0..rows).map(|i| m[(i, j)] * m[(i, p)]).sum();
            for i in 0..rows {
                m[(i, j)] -= d * m[(i, p)];
            }
        }
        let norm = (0..rows).map(|i| m[(i, j)] * m[(i, j)]).sum::<f64>().sqrt();
        let inv = if norm > 1e-300 { 1.0 / norm } else { 0.0 };
        for i in 0..rows {
            m[(i, j)] *= inv;
        }
    }
}

/// `(A w_q)(A w_k*)ᵀ + (A w_q*)(A w_k)ᵀ + (A w_q*)(A w_k*)ᵀ`.
pub fn score_residual(a: &Matrix, est: &ResidualEstimators) -> Result<Matrix> {
    if !est.kq_enabled {
        return Err(Error::Contract(
            "score_residual called with the score estimator disabled".into(),
        ));
    }
    let aq = matmul(a, &est.w_q)?;
    let ak = matmul(a, &est.w_k)?;
    let aqs = matmul(a, &est.w_q_star)?;
    let aks = matmul(a, &est.w_k_star)?;
    let mut r = matmul_bt(&aq, &aks)?;
    r.add_assign(&matmul_bt(&aqs, &ak)?)?;
    r.add_assign(&matmul_bt(&aqs, &aks)?)?;
    Ok(r)
}

/// Tape handles of one elastic binarizer.
#[derive(Debug, Clone, Copy)]
pub struct BinarizerVars {
    pub alpha: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub q: BinarizerVars,
    pub k: BinarizerVars,
    pub v: BinarizerVars,
    pub att: BinarizerVars,
}

#[derive(Debug, Clone, Copy)]
pub struct EstimatorVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_q_star: Var,
    pub w_k_star: Var,
    pub u_v_star: Var,
    pub v_v_star: Var,
}

/// A linear layer on the tape; binary when `input` is present.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
    pub input: Option<BinarizerVars>,
}

pub fn linear(tape: &mut Tape, x: Var, l: &LinearVars, granularity: Granularity, mode: Mode) -> Result<Var> {
    let y = match l.input {
        Some(bz) => binary_linear(tape, x, bz.alpha, bz.beta, l.w, granularity, mode)?,
        None => tape.matmul_bt(x, l.w)?,
    };
    tape.add_row(y, l.b)
}

/// Everything one attention sublayer reads from the tape.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub out: LinearVars,
    /// Empty for the full-precision variant.
    pub heads: Vec<HeadVars>,
    pub estimators: Option<EstimatorVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionShape {
    pub heads: usize,
    pub head_dim: usize,
    pub granularity: Granularity,
    pub kq: bool,
    pub attv: bool,
}

struct BinaryScoresOp {
    surrogate: bool,
}

fn pm1_values(x: &Matrix, alpha: f64, beta: f64, surrogate: bool) -> Matrix {
    x.map(|v| alpha * if surrogate { hardtanh(v - beta) } else { sign(v - beta) })
}

impl CustomOp for BinaryScoresOp {
    fn name(&self) -> &'static str {
        "binary_scores"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let (q, qa, qb) = (inputs[0], inputs[1][(0, 0)], inputs[2][(0, 0)]);
        let (k, ka, kb) = (inputs[3], inputs[4][(0, 0)], inputs[5][(0, 0)]);
        let qv = pm1_values(q, qa, qb, self.surrogate);
        let kv = pm1_values(k, ka, kb, self.surrogate);
        let dq = matmul(grad, &kv).expect("shapes checked on forward");
        let dk = matmul_at(grad, &qv).expect("shapes checked on forward");
        let (dq, dqa, dqb) = elastic_backward(q, qa, qb, &dq, self.surrogate);
        let (dk, dka, dkb) = elastic_backward(k, ka, kb, &dk, self.surrogate);
        vec![
            dq,
            Matrix::scalar(dqa),
            Matrix::scalar(dqb),
            dk,
            Matrix::scalar(dka),
            Matrix::scalar(dkb),
        ]
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v)[(0, 0)]
}

/// `Q_B K_Bᵀ` for one head, read out as `acc · (α_q α_k)` on both paths.
pub fn binary_scores(tape: &mut Tape, q: Var, qz: BinarizerVars, k: Var, kz: BinarizerVars, mode: Mode) -> Result<Var> {
    let (qa, qb, ka, kb) = (
        scalar(tape, qz.alpha),
        scalar(tape, qz.beta),
        scalar(tape, kz.alpha),
        scalar(tape, kz.beta),
    );
    let (qv, kv) = (tape.value(q), tape.value(k));
    if qv.cols() != kv.cols() {
        return Err(Error::dim("binary_scores", qv.shape(), kv.shape()));
    }
    let scale = qa * ka;
    let value = match mode {
        Mode::Surrogate => matmul_bt(&pm1_values(qv, qa, qb, true), &pm1_values(kv, ka, kb, true))?,
        Mode::Train => {
            let acc = matmul_bt(&qv.map(|v| sign(v - qb)), &kv.map(|v| sign(v - kb)))?;
            acc.map(|c| c * scale)
        }
        Mode::Eval => binary_gemm(
            &pack_signs(&qv.map(|v| v - qb)),
            &pack_signs(&kv.map(|v| v - kb)),
            scale,
        )?,
    };
    Ok(tape.custom(
        &[q, qz.alpha, qz.beta, k, kz.alpha, kz.beta],
        value,
        Box::new(BinaryScoresOp {
            surrogate: mode.is_surrogate(),
        }),
    ))
}

struct AttValuesOp {
    surrogate: bool,
}

fn gate_values(p: &Matrix, alpha: f64, beta: f64, surrogate: bool) -> Matrix {
    p.map(|x| {
        if surrogate {
            alpha * ((x - beta) / alpha).clamp(0.0, 1.0)
        } else if crate::quant::attention_bit(x, alpha, beta) {
            alpha
        } else {
            0.0
        }
    })
}

impl CustomOp for AttValuesOp {
    fn name(&self) -> &'static str {
        "binary_att_values"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let (p, pa, pb) = (inputs[0], inputs[1][(0, 0)], inputs[2][(0, 0)]);
        let (v, va, vb) = (inputs[3], inputs[4][(0, 0)], inputs[5][(0, 0)]);
        let att = gate_values(p, pa, pb, self.surrogate);
        let vv = pm1_values(v, va, vb, self.surrogate);
        let datt = matmul_bt(grad, &vv).expect("shapes checked on forward");
        let dv = matmul_at(&att, grad).expect("shapes checked on forward");
        let (dp, dpa, dpb) = attention_backward(p, pa, pb, &datt);
        let (dv, dva, dvb) = elastic_backward(v, va, vb, &dv, self.surrogate);
        vec![
            dp,
            Matrix::scalar(dpa),
            Matrix::scalar(dpb),
            dv,
            Matrix::scalar(dva),
            Matrix::scalar(dvb),
        ]
    }
}

/// `Att_B · V_B` for one head with a `{0, α_a}` map and `±α_v` values.
///
/// Eval runs the ternary-to-binary kernel; train forms the same integer
/// accumulator in floats. Both read out `acc · (α_a α_v)`.
pub fn binary_att_values(
    tape: &mut Tape,
    p: Var,
    pz: BinarizerVars,
    v: Var,
    vz: BinarizerVars,
    mode: Mode,
) -> Result<Var> {
    let (pa, pb, va, vb) = (
        scalar(tape, pz.alpha),
        scalar(tape, pz.beta),
        scalar(tape, vz.alpha),
        scalar(tape, vz.beta),
    );
    if !(pa > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "attention binarizer alpha must be > 0, got {pa}"
        )));
    }
    let (pv, vv) = (tape.value(p), tape.value(v));
    if pv.cols() != vv.rows() {
        return Err(Error::dim("binary_att_values", pv.shape(), vv.shape()));
    }
    let scale = pa * va;
    let value = match mode {
        Mode::Surrogate => matmul(&gate_values(pv, pa, pb, true), &pm1_values(vv, va, vb, true))?,
        Mode::Train => {
            let gate = pv.map(|x| {
                if crate::quant::attention_bit(x, pa, pb) {
                    1.0
                } else {
                    0.0
                }
            });
            let acc = matmul(&gate, &vv.map(|x| sign(x - vb)))?;
            acc.map(|c| c * scale)
        }
        Mode::Eval => {
            let bits = attention_bits(pv, pa, pb);
            let v_t = pack_signs(&vv.map(|x| x - vb).transpose());
            ternary_binary_gemm(&bits, &v_t)?.to_matrix().map(|c| c * scale)
        }
    };
    Ok(tape.custom(
        &[p, pz.alpha, pz.beta, v, vz.alpha, vz.beta],
        value,
        Box::new(AttValuesOp {
            surrogate: mode.is_surrogate(),
        }),
    ))
}

/// Per-head tape vars feeding the head's binarizers.
#[derive(Debug, Clone, Copy)]
pub struct HeadTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// Post-softmax map.
    pub map: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub out: Var,
    /// Concatenated heads, the output projection's input.
    pub context: Var,
    pub heads: Vec<HeadTrace>,
}

/// Multi-head attention over projected `q`, `k`, `v`, before the output
/// projection. `a` is the block input the estimators read.
pub fn multi_head(
    tape: &mut Tape,
    a: Var,
    q: Var,
    k: Var,
    v: Var,
    vars: &AttentionVars,
    shape: &AttentionShape,
    mode: Mode,
) -> Result<(Var, Vec<HeadTrace>)> {
    let d = shape.head_dim;
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let est = vars.estimators.filter(|_| shape.kq || shape.attv);
    let residual = match est {
        Some(e) if shape.kq => {
            let aq = tape.matmul(a, e.w_q)?;
            let ak = tape.matmul(a, e.w_k)?;
            let aqs = tape.matmul(a, e.w_q_star)?;
            let aks = tape.matmul(a, e.w_k_star)?;
            let t1 = tape.matmul_bt(aq, aks)?;
            let t2 = tape.matmul_bt(aqs, ak)?;
            let t3 = tape.matmul_bt(aqs, aks)?;
            let r = tape.add(t1, t2)?;
            Some(tape.add(r, t3)?)
        }
        _ => None,
    };
    let au = match est {
        Some(e) if shape.attv => Some(tape.matmul(a, e.u_v_star)?),
        _ => None,
    };

    let mut outs = Vec::with_capacity(shape.heads);
    let mut traces = Vec::with_capacity(shape.heads);
    for h in 0..shape.heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        let Some(hv) = vars.heads.get(h) else {
            // full precision
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, inv_sqrt);
            let p = tape.softmax_rows(s);
            outs.push(tape.matmul(p, vh)?);
            traces.push(HeadTrace {
                q: qh,
                k: kh,
                v: vh,
                map: p,
            });
            continue;
        };
        let mut s = binary_scores(tape, qh, hv.q, kh, hv.k, mode)?;
        if let Some(r) = residual {
            s = tape.add(s, r)?;
        }
        let s = tape.scale(s, inv_sqrt);
        let p = tape.softmax_rows(s);
        let mut o = binary_att_values(tape, p, hv.att, vh, hv.v, mode)?;
        if let (Some(au), Some(e)) = (au, est) {
            let gate = attention_op(tape, p, hv.att.alpha, hv.att.beta, mode)?;
            if mode != Mode::Surrogate {
                check_hard_gate(tape.value(gate), scalar(tape, hv.att.alpha))?;
            }
            let vrows = tape.slice_rows(e.v_v_star, h * d, d)?;
            let ga = tape.matmul(gate, au)?;
            let term = tape.matmul_bt(ga, vrows)?;
            o = tape.add(o, term)?;
        }
        outs.push(o);
        traces.push(HeadTrace {
            q: qh,
            k: kh,
            v: vh,
            map: p,
        });
    }
    Ok((tape.concat_cols(&outs)?, traces))
}

fn check_hard_gate(m: &Matrix, alpha: f64) -> Result<()> {
    if m.data().iter().all(|&x| x == 0.0 || x == alpha) {
        Ok(())
    } else {
        Err(Error::Contract(
            "binarized attention map left the {0, alpha} level".into(),
        ))
    }
}

/// Full attention sublayer: projections, heads, output projection.
pub fn attention_block(
    tape: &mut Tape,
    a: Var,
    vars: &AttentionVars,
    shape: &AttentionShape,
    mode: Mode,
) -> Result<AttentionTrace> {
    let q = linear(tape, a, &vars.q, shape.granularity, mode)?;
    let k = linear(tape, a, &vars.k, shape.granularity, mode)?;
    let v = linear(tape, a, &vars.v, shape.granularity, mode)?;
    let (context, heads) = multi_head(tape, a, q, k, v, vars, shape, mode)?;
    let out = linear(tape, context, &vars.out, shape.granularity, mode)?;
    Ok(AttentionTrace { out, context, heads })
}

/// Plain-value state of one binary attention sublayer.
#[derive(Debug, Clone)]
pub struct AttentionLayerState {
    pub heads: usize,
    pub head_dim: usize,
    pub granularity: Granularity,
    /// Shared input binarizer of the Q/K/V projections.
    pub input: ElasticBinarizer,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub out_input: ElasticBinarizer,
    pub q: Vec<ElasticBinarizer>,
    pub k: Vec<ElasticBinarizer>,
    pub v: Vec<ElasticBinarizer>,
    pub att: Vec<ElasticBinarizer>,
    pub estimators: Option<ResidualEstimators>,
}

impl AttentionLayerState {
    /// Random layer with `N(0, std)` weights and unit binarizers.
    pub fn random<R: Rng + ?Sized>(hidden: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(vec![format!(
                "hidden ({hidden}) not divisible by heads ({heads})"
            )]));
        }
        let w = |rng: &mut R| Matrix::random_normal(hidden, hidden, std, rng);
        Ok(Self {
            heads,
            head_dim: hidden / heads,
            granularity: Granularity::PerRow,
            input: ElasticBinarizer::pm1(1.0, 0.0),
            w_q: w(rng),
            w_k: w(rng),
            w_v: w(rng),
            w_o: w(rng),
            out_input: ElasticBinarizer::pm1(1.0, 0.0),
            q: vec![ElasticBinarizer::pm1(1.0, 0.0); heads],
            k: vec![ElasticBinarizer::pm1(1.0, 0.0); heads],
            v: vec![ElasticBinarizer::pm1(1.0, 0.0); heads],
            att: vec![ElasticBinarizer::zero_one(1.0, 0.0); heads],
            estimators: None,
        })
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    fn validate(&self) -> Result<()> {
        let c = self.hidden();
        for (name, m) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if m.shape() != (c, c) {
                return Err(Error::dim(name, m.shape(), (c, c)));
            }
        }
        let lens = [self.q.len(), self.k.len(), self.v.len(), self.att.len()];
        if lens.iter().any(|&l| l != self.heads) {
            return Err(Error::Contract(format!(
                "expected {} per-head binarizers, got {lens:?}",
                self.heads
            )));
        }
        for b in self
            .q
            .iter()
            .chain(&self.k)
            .chain(&self.v)
            .chain([&self.input, &self.out_input])
        {
            if b.level != Level::PlusMinusOne {
                return Err(Error::Contract("q/k/v/input binarizers must use the ±1 level".into()));
            }
        }
        if self.att.iter().any(|b| b.level != Level::ZeroOne) {
            return Err(Error::Contract("attention binarizers must use the {0,1} level".into()));
        }
        if let Some(e) = &self.estimators {
            for (name, m) in e.factors() {
                if m.shape() != (c, e.rank) {
                    return Err(Error::dim(name, m.shape(), (c, e.rank)));
                }
                if !m.is_finite() {
                    return Err(Error::NonFinite { tensor: name.into() });
                }
            }
        }
        Ok(())
    }

    /// Records the layer as leaves; returns the variables and the shape.
    pub fn record(&self, tape: &mut Tape) -> Result<(AttentionVars, AttentionShape)> {
        self.validate()?;
        let c = self.hidden();
        let bz = |tape: &mut Tape, b: &ElasticBinarizer| BinarizerVars {
            alpha: tape.leaf(Matrix::scalar(b.alpha)),
            beta: tape.leaf(Matrix::scalar(b.beta)),
        };
        let input = bz(tape, &self.input);
        let out_input = bz(tape, &self.out_input);
        let lin = |tape: &mut Tape, w: &Matrix, input| LinearVars {
            w: tape.leaf(w.clone()),
            b: tape.leaf(Matrix::zeros(1, c)),
            input: Some(input),
        };
        let q = lin(tape, &self.w_q, input);
        let k = lin(tape, &self.w_k, input);
        let v = lin(tape, &self.w_v, input);
        let out = lin(tape, &self.w_o, out_input);
        let heads = (0..self.heads)
            .map(|h| HeadVars {
                q: bz(tape, &self.q[h]),
                k: bz(tape, &self.k[h]),
                v: bz(tape, &self.v[h]),
                att: bz(tape, &self.att[h]),
            })
            .collect();
        let estimators = self.estimators.as_ref().map(|e| EstimatorVars {
            w_q: tape.leaf(e.w_q.clone()),
            w_k: tape.leaf(e.w_k.clone()),
            w_q_star: tape.leaf(e.w_q_star.clone()),
            w_k_star: tape.leaf(e.w_k_star.clone()),
            u_v_star: tape.leaf(e.u_v_star.clone()),
            v_v_star: tape.leaf(e.v_v_star.clone()),
        });
        let shape = AttentionShape {
            heads: self.heads,
            head_dim: self.head_dim,
            granularity: self.granularity,
            kq: self.estimators.as_ref().is_some_and(|e| e.kq_enabled),
            attv: self.estimators.as_ref().is_some_and(|e| e.attv_enabled),
        };
        Ok((
            AttentionVars {
                q,
                k,
                v,
                out,
                heads,
                estimators,
            },
            shape,
        ))
    }
}

/// Attention sublayer forward on plain values.
pub fn attention_forward(a: &Matrix, layer: &AttentionLayerState, mode: Mode) -> Result<Matrix> {
    if a.cols() != layer.hidden() {
        return Err(Error::dim("attention_forward", a.shape(), (a.rows(), layer.hidden())));
    }
    let mut tape = Tape::new();
    let (vars, shape) = layer.record(&mut tape)?;
    let av = tape.leaf(a.clone());
    let trace = attention_block(&mut tape, av, &vars, &shape, mode)?;
    Ok(tape.value(trace.out).clone())
}

/// `softmax(Q_B K_Bᵀ / √d_k)` for one head.
pub fn attention_scores_binary(
    q: &Matrix,
    k: &Matrix,
    qz: &ElasticBinarizer,
    kz: &ElasticBinarizer,
    mode: Mode,
) -> Result<Matrix> {
    if q.shape() != k.shape() {
        return Err(Error::dim("attention_scores_binary", q.shape(), k.shape()));
    }
    let mut tape = Tape::new();
    let mut bz = |b: &ElasticBinarizer| BinarizerVars {
        alpha: tape.leaf(Matrix::scalar(b.alpha)),
        beta: tape.leaf(Matrix::scalar(b.beta)),
    };
    let (qz, kz) = (bz(qz), bz(kz));
    let qv = tape.leaf(q.clone());
    let kv = tape.leaf(k.clone());
    let s = binary_scores(&mut tape, qv, qz, kv, kz, mode)?;
    let s = tape.scale(s, 1.0 / (q.cols() as f64).sqrt());
    let p = tape.softmax_rows(s);
    Ok(tape.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_scores_give_uniform_attention() {
        let q = Matrix::filled(4, 2, 0.3);
        let b = ElasticBinarizer::pm1(1.0, 0.0);
        let p = attention_scores_binary(&q, &q, &b, &b, Mode::Train).unwrap();
        for v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_scores() {
        let q = Matrix::from_rows(&[[1.0, 1.0], [1.0, -1.0]]);
        let mut tape = Tape::new();
        let one = tape.leaf(Matrix::scalar(1.0));
        let zero = tape.leaf(Matrix::scalar(0.0));
        let z = BinarizerVars { alpha: one, beta: zero };
        let qv = tape.leaf(q);
        let s = binary_scores(&mut tape, qv, z, qv, z, Mode::Eval).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn zero_factors_give_zero_residual() {
        let est = ResidualEstimators::zeros(4, 2, true, true);
        let a = Matrix::filled(3, 4, 0.7);
        assert_eq!(score_residual(&a, &est).unwrap().frobenius_sq(), 0.0);
        let off = ResidualEstimators::zeros(4, 2, false, true);
        assert!(matches!(score_residual(&a, &off), Err(Error::Contract(_))));
    }

    #[test]
    fn single_token_rank_one_expansion() {
        let mut est = ResidualEstimators::zeros(2, 1, true, false);
        est.w_q = Matrix::from_rows(&[[1.0], [2.0]]);
        est.w_k = Matrix::from_rows(&[[0.5], [-1.0]]);
        est.w_q_star = Matrix::from_rows(&[[0.1], [0.0]]);
        est.w_k_star = Matrix::from_rows(&[[0.0], [0.3]]);
        let a = Matrix::from_rows(&[[1.0, -2.0]]);
        let (q, k, qs, ks) = (1.0 - 4.0, 0.5 + 2.0, 0.1, -0.6);
        let r = score_residual(&a, &est).unwrap();
        assert!((r[(0, 0)] - (q * ks + qs * k + qs * ks)).abs() < 1e-14);
    }

    #[test]
    fn power_iteration_recovers_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_rows(&[[1.0], [2.0], [-1.0]]);
        let y = Matrix::from_rows(&[[0.5], [0.5], [1.0], [0.0]]);
        // w is out × in = 4 × 3, wᵀ = x yᵀ
        let w = matmul_bt(&y, &x).unwrap();
        let (u, v) = low_rank(&w, 1, &mut rng);
        let approx = matmul_bt(&u, &v).unwrap();
        assert!(approx.max_abs_diff(&w.transpose()) < 1e-12);
    }

    #[test]
    fn disabled_estimators_match_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layer = AttentionLayerState::random(8, 2, 0.3, &mut rng).unwrap();
        let a = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let plain = attention_forward(&a, &layer, Mode::Train).unwrap();
        layer.estimators = Some(ResidualEstimators::zeros(8, 1, false, false));
        let off = attention_forward(&a, &layer, Mode::Train).unwrap();
        assert_eq!(plain, off);
    }
}
