//! Binarizers and their straight-through backward passes.
//!
//! Three quantizers live here: the weight binarizer (per-row or per-tensor
//! L1 scale, centered sign), the elastic `±α` activation binarizer with a
//! trainable shift, and the `{0, α}` round-clip binarizer for attention maps.
//!
//! Each has a pure value function, a pure backward, and a tape op. In
//! [`Mode::Surrogate`] the forward evaluates the smooth clip surrogate whose
//! exact gradient the backward returns; this is what finite-difference
//! checks run against. [`Mode::Train`] keeps the hard forward with the same
//! backward (straight-through). [`Mode::Eval`] uses the packed kernels.

use crate::bitkernel::{binary_gemm, pack_positive, pack_signs, PackedBitMatrix};
use crate::error::{Error, Result};
use crate::model::Granularity;
use crate::numerics::ops::{matmul, matmul_at, matmul_bt};
use crate::numerics::{CustomOp, Matrix, Tape, Var};

/// Half-width of the straight-through window.
pub const STE_WINDOW: f64 = 1.0;

/// `+1` for `x >= 0`, else `-1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub fn ste_mask(x: f64) -> f64 {
    if x.abs() <= STE_WINDOW {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn hardtanh(x: f64) -> f64 {
    x.clamp(-STE_WINDOW, STE_WINDOW)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Hard binarized forward (float simulation), straight-through backward.
    Train,
    /// Smooth clip-surrogate forward; backward is its exact gradient.
    Surrogate,
    /// Hard forward through packed XNOR-popcount kernels.
    Eval,
}

impl Mode {
    pub fn is_surrogate(self) -> bool {
        self == Mode::Surrogate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    /// `{-α, +α}`
    PlusMinusOne,
    /// `{0, α}`
    ZeroOne,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticBinarizer {
    pub alpha: f64,
    pub beta: f64,
    pub level: Level,
}

impl ElasticBinarizer {
    pub fn pm1(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            level: Level::PlusMinusOne,
        }
    }

    pub fn zero_one(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            level: Level::ZeroOne,
        }
    }

    fn expect_level(&self, level: Level) -> Result<()> {
        if self.level != level {
            return Err(Error::Contract(format!(
                "binarizer level {:?}, expected {level:?}",
                self.level
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "attention binarizer alpha must be > 0, got {alpha}"
        )));
    }
    Ok(())
}

/// Binarized tensor: simulated values, packed bits and scale(s).
#[derive(Debug, Clone)]
pub struct Binarized {
    pub values: Matrix,
    pub bits: PackedBitMatrix,
    /// One scale for activations, one per row for weights.
    pub scales: Vec<f64>,
}

/// Per-row (or whole-tensor) mean and L1 scale of a weight matrix.
pub fn weight_stats(w: &Matrix, granularity: Granularity) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = w.shape();
    match granularity {
        Granularity::PerRow => {
            let mut means = Vec::with_capacity(rows);
            let mut scales = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = w.row(r);
                let n = cols.max(1) as f64;
                means.push(row.iter().sum::<f64>() / n);
                scales.push(row.iter().map(|v| v.abs()).sum::<f64>() / n);
            }
            (means, scales)
        }
        Granularity::PerTensor => {
            let n = w.len().max(1) as f64;
            let mean = w.data().iter().sum::<f64>() / n;
            let scale = w.data().iter().map(|v| v.abs()).sum::<f64>() / n;
            (vec![mean; rows], vec![scale; rows])
        }
    }
}

/// Centered weights `w - mean` row by row.
fn centered(w: &Matrix, means: &[f64]) -> Matrix {
    let cols = w.cols();
    let mut out = w.clone();
    for (r, row) in out.data_mut().chunks_mut(cols.max(1)).enumerate() {
        for v in row {
            *v -= means[r];
        }
    }
    out
}

fn weight_values(w: &Matrix, granularity: Granularity, surrogate: bool) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (means, scales) = weight_stats(w, granularity);
    let cols = w.cols();
    let mut out = centered(w, &means);
    for (r, row) in out.data_mut().chunks_mut(cols.max(1)).enumerate() {
        for v in row {
            *v = scales[r] * if surrogate { hardtanh(*v) } else { sign(*v) };
        }
    }
    (out, means, scales)
}

/// Weight binarizer: each row becomes `s · sign(w - mean)` with `s = ‖w‖₁/n`.
pub fn binarize_weight(w: &Matrix, granularity: Granularity) -> Binarized {
    let (values, means, scales) = weight_values(w, granularity, false);
    Binarized {
        values,
        bits: pack_signs(&centered(w, &means)),
        scales,
    }
}

/// Gradient of the weight binarizer w.r.t. the latent weights.
///
/// Per group: `dw_j = sgn(w_j)/n · Σ g_i q_i + s · (ste(c_j) g_j - mean_i(g_i ste(c_i)))`
/// where `c = w - mean` and `q` is the forward level (sign or hardtanh).
pub fn weight_backward(w: &Matrix, g: &Matrix, granularity: Granularity, surrogate: bool) -> Matrix {
    let (means, scales) = weight_stats(w, granularity);
    let c = centered(w, &means);
    let q = |x: f64| if surrogate { hardtanh(x) } else { sign(x) };
    let abs_grad = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let (rows, cols) = w.shape();
    let mut out = Matrix::zeros(rows, cols);
    let groups: Vec<std::ops::Range<usize>> = match granularity {
        Granularity::PerRow => (0..rows).map(|r| r * cols..(r + 1) * cols).collect(),
        Granularity::PerTensor => vec![0..rows * cols],
    };
    for range in groups {
        if range.is_empty() {
            continue;
        }
        let n = range.len() as f64;
        let s = scales[range.start / cols.max(1)];
        let (mut gq, mut gste) = (0.0, 0.0);
        for i in range.clone() {
            gq += g.data()[i] * q(c.data()[i]);
            gste += g.data()[i] * ste_mask(c.data()[i]);
        }
        for j in range {
            let cj = c.data()[j];
            out.data_mut()[j] = abs_grad(w.data()[j]) / n * gq + s * (ste_mask(cj) * g.data()[j] - gste / n);
        }
    }
    out
}

fn elastic_values(a: &Matrix, alpha: f64, beta: f64, surrogate: bool) -> Matrix {
    a.map(|x| alpha * if surrogate { hardtanh(x - beta) } else { sign(x - beta) })
}

/// `±α` activation binarizer `α · sign(a - β)`.
pub fn binarize_activation_pm1(a: &Matrix, q: &ElasticBinarizer) -> Result<Binarized> {
    q.expect_level(Level::PlusMinusOne)?;
    Ok(Binarized {
        values: elastic_values(a, q.alpha, q.beta, false),
        bits: pack_signs(&a.map(|x| x - q.beta)),
        scales: vec![q.alpha],
    })
}

/// Returns `(da, dα, dβ)` for the `±α` binarizer.
pub fn elastic_backward(a: &Matrix, alpha: f64, beta: f64, g: &Matrix, surrogate: bool) -> (Matrix, f64, f64) {
    let mut da = Matrix::zeros(a.rows(), a.cols());
    let (mut dalpha, mut dbeta) = (0.0, 0.0);
    for ((d, &x), &gi) in da.data_mut().iter_mut().zip(a.data()).zip(g.data()) {
        let c = x - beta;
        let m = ste_mask(c);
        *d = gi * alpha * m;
        dalpha += gi * if surrogate { hardtanh(c) } else { sign(c) };
        dbeta -= gi * alpha * m;
    }
    (da, dalpha, dbeta)
}

/// Hard attention gate: `round(clip((att - β)/α, 0, 1))` with ties rounding up.
#[inline]
pub fn attention_bit(att: f64, alpha: f64, beta: f64) -> bool {
    (att - beta) / alpha >= 0.5
}

fn attention_values(att: &Matrix, alpha: f64, beta: f64, surrogate: bool) -> Matrix {
    att.map(|p| {
        if surrogate {
            alpha * ((p - beta) / alpha).clamp(0.0, 1.0)
        } else if attention_bit(p, alpha, beta) {
            alpha
        } else {
            0.0
        }
    })
}

/// `{0, α}` attention-map binarizer.
pub fn binarize_attention_01(att: &Matrix, q: &ElasticBinarizer) -> Result<Binarized> {
    q.expect_level(Level::ZeroOne)?;
    check_alpha(q.alpha)?;
    let bits = PackedBitMatrix::from_fn(att.rows(), att.cols(), |i, j| {
        attention_bit(att[(i, j)], q.alpha, q.beta)
    });
    Ok(Binarized {
        values: attention_values(att, q.alpha, q.beta, false),
        bits,
        scales: vec![q.alpha],
    })
}

/// Returns `(d_att, dα, dβ)` of the surrogate `α · clip((att - β)/α, 0, 1)`.
pub fn attention_backward(att: &Matrix, alpha: f64, beta: f64, g: &Matrix) -> (Matrix, f64, f64) {
    let mut d = Matrix::zeros(att.rows(), att.cols());
    let (mut dalpha, mut dbeta) = (0.0, 0.0);
    for ((di, &p), &gi) in d.data_mut().iter_mut().zip(att.data()).zip(g.data()) {
        let x = (p - beta) / alpha;
        if (0.0..=1.0).contains(&x) {
            *di = gi;
            dbeta -= gi;
        } else if x > 1.0 {
            dalpha += gi;
        }
    }
    (d, dalpha, dbeta)
}

/// Binarization residual `full - binarized`.
pub fn residual(full: &Matrix, binarized: &Matrix) -> Result<Matrix> {
    full.zip_map(binarized, "residual", |a, b| a - b)
}

struct SignSte;

impl CustomOp for SignSte {
    fn name(&self) -> &'static str {
        "sign_ste"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let mut d = grad.clone();
        for (di, &x) in d.data_mut().iter_mut().zip(inputs[0].data()) {
            *di *= ste_mask(x);
        }
        vec![d]
    }
}

/// Plain `sign` with the straight-through window gradient.
pub fn sign_ste(tape: &mut Tape, x: Var) -> Var {
    let value = tape.value(x).map(sign);
    tape.custom(&[x], value, Box::new(SignSte))
}

struct WeightOp {
    granularity: Granularity,
    surrogate: bool,
}

impl CustomOp for WeightOp {
    fn name(&self) -> &'static str {
        "binarize_weight"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        vec![weight_backward(inputs[0], grad, self.granularity, self.surrogate)]
    }
}

/// Records the weight binarizer on the tape.
pub fn weight_op(tape: &mut Tape, w: Var, granularity: Granularity, mode: Mode) -> Var {
    let (value, _, _) = weight_values(tape.value(w), granularity, mode.is_surrogate());
    tape.custom(
        &[w],
        value,
        Box::new(WeightOp {
            granularity,
            surrogate: mode.is_surrogate(),
        }),
    )
}

struct ElasticOp {
    surrogate: bool,
}

impl CustomOp for ElasticOp {
    fn name(&self) -> &'static str {
        "binarize_activation_pm1"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let (alpha, beta) = (inputs[1][(0, 0)], inputs[2][(0, 0)]);
        let (da, dalpha, dbeta) = elastic_backward(inputs[0], alpha, beta, grad, self.surrogate);
        vec![da, Matrix::scalar(dalpha), Matrix::scalar(dbeta)]
    }
}

fn scalar_of(tape: &Tape, v: Var, what: &'static str) -> Result<f64> {
    let m = tape.value(v);
    if m.shape() != (1, 1) {
        return Err(Error::dim(what, m.shape(), (1, 1)));
    }
    Ok(m[(0, 0)])
}

/// Records `α · sign(a - β)` with `α`, `β` as 1×1 tape variables.
pub fn elastic_op(tape: &mut Tape, a: Var, alpha: Var, beta: Var, mode: Mode) -> Result<Var> {
    let al = scalar_of(tape, alpha, "elastic alpha")?;
    let be = scalar_of(tape, beta, "elastic beta")?;
    let value = elastic_values(tape.value(a), al, be, mode.is_surrogate());
    Ok(tape.custom(
        &[a, alpha, beta],
        value,
        Box::new(ElasticOp {
            surrogate: mode.is_surrogate(),
        }),
    ))
}

struct AttentionOp;

impl CustomOp for AttentionOp {
    fn name(&self) -> &'static str {
        "binarize_attention_01"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let (alpha, beta) = (inputs[1][(0, 0)], inputs[2][(0, 0)]);
        let (d, dalpha, dbeta) = attention_backward(inputs[0], alpha, beta, grad);
        vec![d, Matrix::scalar(dalpha), Matrix::scalar(dbeta)]
    }
}

/// Records the `{0, α}` attention binarizer.
pub fn attention_op(tape: &mut Tape, att: Var, alpha: Var, beta: Var, mode: Mode) -> Result<Var> {
    let al = scalar_of(tape, alpha, "attention alpha")?;
    let be = scalar_of(tape, beta, "attention beta")?;
    check_alpha(al)?;
    let value = attention_values(tape.value(att), al, be, mode.is_surrogate());
    Ok(tape.custom(&[att, alpha, beta], value, Box::new(AttentionOp)))
}

struct BinaryLinearOp {
    granularity: Granularity,
    surrogate: bool,
}

impl CustomOp for BinaryLinearOp {
    fn name(&self) -> &'static str {
        "binary_linear"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let (x, w) = (inputs[0], inputs[3]);
        let (alpha, beta) = (inputs[1][(0, 0)], inputs[2][(0, 0)]);
        let a = elastic_values(x, alpha, beta, self.surrogate);
        let (wb, _, _) = weight_values(w, self.granularity, self.surrogate);
        // y = a · wbᵀ
        let da = matmul(grad, &wb).expect("shapes checked on forward");
        let dwb = matmul_at(grad, &a).expect("shapes checked on forward");
        let (dx, dalpha, dbeta) = elastic_backward(x, alpha, beta, &da, self.surrogate);
        let dw = weight_backward(w, &dwb, self.granularity, self.surrogate);
        vec![dx, Matrix::scalar(dalpha), Matrix::scalar(dbeta), dw]
    }
}

/// Exact ±1 product `sign(x - β) · sign(c)ᵀ` as integers held in f64.
fn sign_product(x: &Matrix, beta: f64, c: &Matrix) -> Matrix {
    let sx = x.map(|v| sign(v - beta));
    let sc = c.map(sign);
    matmul_bt(&sx, &sc).expect("caller checked shapes")
}

/// Binary linear `α · sign(x - β) · W_Bᵀ` without bias.
///
/// Train and eval produce bit-identical values: both form the exact integer
/// accumulator and read it out as `(acc · α) · s_j`.
pub fn binary_linear(
    tape: &mut Tape,
    x: Var,
    alpha: Var,
    beta: Var,
    w: Var,
    granularity: Granularity,
    mode: Mode,
) -> Result<Var> {
    let al = scalar_of(tape, alpha, "binary_linear alpha")?;
    let be = scalar_of(tape, beta, "binary_linear beta")?;
    let (xv, wv) = (tape.value(x), tape.value(w));
    if xv.cols() != wv.cols() {
        return Err(Error::dim("binary_linear", xv.shape(), wv.shape()));
    }
    let value = match mode {
        Mode::Surrogate => {
            let (wb, _, _) = weight_values(wv, granularity, true);
            matmul_bt(&elastic_values(xv, al, be, true), &wb)?
        }
        Mode::Train => {
            let (means, scales) = weight_stats(wv, granularity);
            let mut acc = sign_product(xv, be, &centered(wv, &means));
            readout_columns(&mut acc, al, &scales);
            acc
        }
        Mode::Eval => {
            let (means, scales) = weight_stats(wv, granularity);
            let xb = pack_signs(&xv.map(|v| v - be));
            let wb = pack_signs(&centered(wv, &means));
            let mut out = binary_gemm(&xb, &wb, al)?;
            scale_columns(&mut out, &scales);
            out
        }
    };
    Ok(tape.custom(
        &[x, alpha, beta, w],
        value,
        Box::new(BinaryLinearOp {
            granularity,
            surrogate: mode.is_surrogate(),
        }),
    ))
}

/// `acc[i][j] ← (acc[i][j] · scale) · col[j]`, the kernel readout order.
pub(crate) fn readout_columns(acc: &mut Matrix, scale: f64, col: &[f64]) {
    let cols = acc.cols();
    for row in acc.data_mut().chunks_mut(cols.max(1)) {
        for (v, s) in row.iter_mut().zip(col) {
            *v = (*v * scale) * s;
        }
    }
}

fn scale_columns(m: &mut Matrix, col: &[f64]) {
    let cols = m.cols();
    for row in m.data_mut().chunks_mut(cols.max(1)) {
        for (v, s) in row.iter_mut().zip(col) {
            *v *= s;
        }
    }
}

/// `{0,1}` pattern of the attention gate as a packed matrix.
pub fn attention_bits(att: &Matrix, alpha: f64, beta: f64) -> PackedBitMatrix {
    pack_positive(&att.map(|p| if attention_bit(p, alpha, beta) { 1.0 } else { 0.0 }))
}
