//! Self-contained oracle and invariant suites behind the `verify` command.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::binattn::{
    attention_block, binary_att_values, binary_scores, score_residual, AttentionLayerState, BinarizerVars,
    ResidualEstimators,
};
use crate::bitkernel::{binary_gemm_acc, pack_positive, pack_signs, ternary_binary_gemm};
use crate::error::{Error, Result};
use crate::model::Granularity;
use crate::model::{build_model, ModelConfig, SequenceInput, Variant};
use crate::numerics::ops::matmul;
use crate::numerics::{Matrix, Tape, Var};
use crate::pretrain::{kl_op, mask_tokens, mse_op, Corpus, NspPair, NUM_SPECIALS};
use crate::quant::{attention_op, binarize_weight, binary_linear, elastic_op, residual, weight_op, Mode};
use crate::rng::{indexed, Stream};

pub const SUITES: [&str; 6] = ["kernel", "ternary", "gradients", "recovery", "agreement", "masking"];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub checks: usize,
    /// Failing property or a one-line summary.
    pub detail: String,
}

/// Runs one named suite.
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteResult> {
    let mut rng = indexed(
        seed,
        Stream::Verify,
        SUITES.iter().position(|s| *s == name).unwrap_or(0) as u64,
    );
    let (name, r) = match name {
        "kernel" => ("kernel", kernel_suite(&mut rng, 500)),
        "ternary" => ("ternary", ternary_suite(&mut rng, 500)),
        "gradients" => ("gradients", gradient_suite(&mut rng)),
        "recovery" => ("recovery", recovery_suite(&mut rng, 50)),
        "agreement" => ("agreement", agreement_suite(seed, 20)),
        "masking" => ("masking", masking_suite(seed)),
        other => {
            return Err(Error::Config(vec![format!(
                "unknown suite `{other}` (expected one of {})",
                SUITES.join(", ")
            )]))
        }
    };
    let (checks, failure) = r?;
    Ok(SuiteResult {
        name,
        passed: failure.is_none(),
        checks,
        detail: failure.unwrap_or_else(|| "ok".into()),
    })
}

/// Runs every suite, or only `only`.
pub fn run_all(seed: u64, only: Option<&str>) -> Result<Vec<SuiteResult>> {
    match only {
        Some(s) => Ok(vec![run_suite(s, seed)?]),
        None => SUITES.iter().map(|s| run_suite(s, seed)).collect(),
    }
}

pub fn table(results: &[SuiteResult]) -> String {
    let mut out = format!("{:<10} {:<6} {:>7}  detail\n", "suite", "result", "checks");
    for r in results {
        out.push_str(&format!(
            "{:<10} {:<6} {:>7}  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.checks,
            r.detail
        ));
    }
    out
}

type Outcome = Result<(usize, Option<String>)>;

fn pm1<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
}

fn kernel_suite(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    for i in 0..n {
        let (m, k, p) = (
            rng.random_range(1..=130),
            rng.random_range(1..=130),
            rng.random_range(1..=130),
        );
        let a = pm1(m, k, rng);
        let b = pm1(p, k, rng);
        let acc = binary_gemm_acc(&pack_signs(&a), &pack_signs(&b))?;
        let want = matmul(&a, &b.transpose())?;
        if acc.to_matrix() != want {
            return Ok((
                i + 1,
                Some(format!("binary_gemm differs from float GEMM at {m}x{k}x{p}")),
            ));
        }
    }
    Ok((n, None))
}

fn ternary_suite(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    for i in 0..n {
        let (m, k, p) = (
            rng.random_range(1..=130),
            rng.random_range(1..=130),
            rng.random_range(1..=130),
        );
        let att = Matrix::from_fn(m, k, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let v = pm1(k, p, rng);
        let got = ternary_binary_gemm(&pack_positive(&att), &pack_signs(&v.transpose()))?;
        if got.to_matrix() != matmul(&att, &v)? {
            return Ok((
                i + 1,
                Some(format!("ternary trick differs from direct product at {m}x{k}x{p}")),
            ));
        }
    }
    Ok((n, None))
}

/// Central finite-difference gradient check of `f` at `inputs`.
///
/// The scalar under test is `Σ f(x) ⊙ R` for a fixed random `R`. Returns
/// the largest per-input relative error `‖g_fd - g‖ / max(‖g_fd‖, ‖g‖)`.
pub fn fd_check(inputs: &[Matrix], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let (rows, cols) = tape.value(out).shape();
    let weights = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    let value = |xs: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|m| t.leaf(m.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let grads = tape.backward_with(out, weights.clone())?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (idx, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[idx])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let mut numeric = Matrix::zeros(x.rows(), x.cols());
        let mut xs = inputs.to_vec();
        for e in 0..x.len() {
            let orig = x.data()[e];
            xs[idx].data_mut()[e] = orig + h;
            let up = value(&xs)?;
            xs[idx].data_mut()[e] = orig - h;
            let down = value(&xs)?;
            xs[idx].data_mut()[e] = orig;
            numeric.data_mut()[e] = (up - down) / (2.0 * h);
        }
        let diff = analytic.sub(&numeric)?.frobenius_sq().sqrt();
        let scale = analytic.frobenius_sq().sqrt().max(numeric.frobenius_sq().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

/// Uniform entries in `[lo, hi)` kept at least `margin` away from `kinks`.
pub fn away_from<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
    rng: &mut R,
) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            break v;
        }
    })
}

/// Weights whose centred values and magnitudes avoid the binarizer kinks.
fn smooth_weights<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    loop {
        let w = away_from(rows, cols, -0.8, 0.8, &[0.0], 1e-3, rng);
        let means: Vec<f64> = (0..rows).map(|r| w.row(r).iter().sum::<f64>() / cols as f64).collect();
        let ok = (0..rows).all(|r| {
            w.row(r)
                .iter()
                .all(|v| ((v - means[r]).abs() - 1.0).abs() > 1e-3 && (v - means[r]).abs() > 1e-3)
        });
        if ok {
            return w;
        }
    }
}

struct GradCase {
    name: &'static str,
    inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Matrix>>,
    f: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn bz(v: &[Var], a: usize) -> BinarizerVars {
    BinarizerVars {
        alpha: v[a],
        beta: v[a + 1],
    }
}

fn scalar_in<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> Matrix {
    Matrix::scalar(rng.random_range(lo..hi))
}

fn gradient_cases() -> Vec<GradCase> {
    let n = |r: usize, c: usize| move |rng: &mut ChaCha8Rng| Matrix::random_normal(r, c, 1.0, rng);
    vec![
        GradCase {
            name: "matmul",
            inputs: Box::new(move |r| vec![n(3, 4)(r), n(4, 2)(r)]),
            f: Box::new(|t, v| t.matmul(v[0], v[1])),
        },
        GradCase {
            name: "matmul_bt",
            inputs: Box::new(move |r| vec![n(3, 4)(r), n(5, 4)(r)]),
            f: Box::new(|t, v| t.matmul_bt(v[0], v[1])),
        },
        GradCase {
            name: "mul_sub_add",
            inputs: Box::new(move |r| vec![n(2, 3)(r), n(2, 3)(r)]),
            f: Box::new(|t, v| {
                let m = t.mul(v[0], v[1])?;
                let s = t.sub(m, v[1])?;
                let a = t.add(s, v[0])?;
                Ok(t.scale(a, 0.7))
            }),
        },
        GradCase {
            name: "add_row",
            inputs: Box::new(move |r| vec![n(3, 4)(r), n(1, 4)(r)]),
            f: Box::new(|t, v| t.add_row(v[0], v[1])),
        },
        GradCase {
            name: "softmax_rows",
            inputs: Box::new(move |r| vec![n(3, 5)(r)]),
            f: Box::new(|t, v| Ok(t.softmax_rows(v[0]))),
        },
        GradCase {
            name: "layer_norm",
            inputs: Box::new(move |r| vec![n(3, 6)(r), n(1, 6)(r), n(1, 6)(r)]),
            f: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-12)),
        },
        GradCase {
            name: "gelu",
            inputs: Box::new(move |r| vec![n(3, 4)(r)]),
            f: Box::new(|t, v| Ok(t.gelu(v[0]))),
        },
        GradCase {
            name: "cross_entropy",
            inputs: Box::new(move |r| vec![n(4, 5)(r)]),
            f: Box::new(|t, v| t.cross_entropy(v[0], &[1, usize::MAX, 4, 0], Some(usize::MAX))),
        },
        GradCase {
            name: "slice_concat_gather",
            inputs: Box::new(move |r| vec![n(5, 6)(r)]),
            f: Box::new(|t, v| {
                let a = t.slice_cols(v[0], 1, 3)?;
                let b = t.slice_cols(v[0], 4, 2)?;
                let c = t.concat_cols(&[b, a])?;
                let d = t.slice_rows(c, 1, 3)?;
                let g = t.gather_rows(d, &[2, 0, 2])?;
                let s = t.sum(g);
                let m = t.mean(c);
                t.add(s, m)
            }),
        },
        GradCase {
            name: "dropout",
            inputs: Box::new(move |r| vec![n(2, 4)(r)]),
            f: Box::new(|t, v| t.dropout(v[0], Matrix::from_rows(&[[0.0, 2.0, 2.0, 0.0], [2.0, 2.0, 0.0, 2.0]]))),
        },
        GradCase {
            name: "binarize_weight_row",
            inputs: Box::new(|r| vec![smooth_weights(3, 5, r)]),
            f: Box::new(|t, v| Ok(weight_op(t, v[0], Granularity::PerRow, Mode::Surrogate))),
        },
        GradCase {
            name: "binarize_weight_tensor",
            inputs: Box::new(|r| vec![smooth_weights(1, 12, r).transpose()]),
            f: Box::new(|t, v| Ok(weight_op(t, v[0], Granularity::PerTensor, Mode::Surrogate))),
        },
        GradCase {
            name: "binarize_activation",
            inputs: Box::new(|r| {
                let beta = rng_scalar(r, -0.3, 0.3);
                let a = away_from(3, 4, -2.0, 2.0, &[beta - 1.0, beta + 1.0], 1e-3, r);
                vec![a, scalar_in(0.5, 1.5, r), Matrix::scalar(beta)]
            }),
            f: Box::new(|t, v| elastic_op(t, v[0], v[1], v[2], Mode::Surrogate)),
        },
        GradCase {
            name: "binarize_attention",
            inputs: Box::new(|r| {
                let (alpha, beta) = (rng_scalar(r, 0.3, 0.8), rng_scalar(r, -0.1, 0.1));
                let att = away_from(3, 4, -0.2, 1.0, &[beta, beta + alpha], 1e-3, r);
                vec![att, Matrix::scalar(alpha), Matrix::scalar(beta)]
            }),
            f: Box::new(|t, v| attention_op(t, v[0], v[1], v[2], Mode::Surrogate)),
        },
        GradCase {
            name: "binary_linear",
            inputs: Box::new(|r| {
                let beta = rng_scalar(r, -0.2, 0.2);
                let x = away_from(3, 5, -2.0, 2.0, &[beta - 1.0, beta + 1.0], 1e-3, r);
                vec![x, scalar_in(0.5, 1.5, r), Matrix::scalar(beta), smooth_weights(4, 5, r)]
            }),
            f: Box::new(|t, v| binary_linear(t, v[0], v[1], v[2], v[3], Granularity::PerRow, Mode::Surrogate)),
        },
        GradCase {
            name: "binary_scores",
            inputs: Box::new(|r| {
                let k = [-1.0, 1.0];
                vec![
                    away_from(3, 4, -2.0, 2.0, &k, 1e-3, r),
                    scalar_in(0.5, 1.5, r),
                    Matrix::scalar(0.0),
                    away_from(5, 4, -2.0, 2.0, &k, 1e-3, r),
                    scalar_in(0.5, 1.5, r),
                    Matrix::scalar(0.0),
                ]
            }),
            f: Box::new(|t, v| binary_scores(t, v[0], bz(v, 1), v[3], bz(v, 4), Mode::Surrogate)),
        },
        GradCase {
            name: "binary_att_values",
            inputs: Box::new(|r| {
                vec![
                    away_from(3, 4, 0.0, 1.0, &[0.0, 0.6], 1e-3, r),
                    Matrix::scalar(0.6),
                    Matrix::scalar(0.0),
                    away_from(4, 2, -2.0, 2.0, &[-1.0, 1.0], 1e-3, r),
                    scalar_in(0.5, 1.5, r),
                    Matrix::scalar(0.0),
                ]
            }),
            f: Box::new(|t, v| binary_att_values(t, v[0], bz(v, 1), v[3], bz(v, 4), Mode::Surrogate)),
        },
        GradCase {
            name: "kl_distill",
            inputs: Box::new(move |r| vec![n(3, 5)(r)]),
            f: Box::new(|t, v| kl_op(t, v[0], &fixed(3, 5), 2.0)),
        },
        GradCase {
            name: "mse_distill",
            inputs: Box::new(move |r| vec![n(3, 4)(r)]),
            f: Box::new(|t, v| mse_op(t, v[0], &fixed(3, 4))),
        },
    ]
}

/// Deterministic stand-in for a teacher output.
fn fixed(rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| ((i * cols + j) as f64 * 0.7).sin())
}

fn rng_scalar<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Points per gradient case.
pub const FD_POINTS: usize = 10;
pub const FD_TOLERANCE: f64 = 1e-4;

fn gradient_suite(rng: &mut ChaCha8Rng) -> Outcome {
    let mut checks = 0;
    for case in gradient_cases() {
        for _ in 0..FD_POINTS {
            let inputs = (case.inputs)(rng);
            let err = fd_check(&inputs, &*case.f, rng)?;
            checks += 1;
            if !(err < FD_TOLERANCE) {
                return Ok((checks, Some(format!("{}: relative error {err:.3e}", case.name))));
            }
        }
    }
    let layer_err = attention_layer_gradient(rng)?;
    checks += 1;
    if !(layer_err < FD_TOLERANCE) {
        return Ok((checks, Some(format!("attention_block: relative error {layer_err:.3e}"))));
    }
    Ok((checks, None))
}

/// FD check of a whole binary attention sublayer (with estimators) w.r.t.
/// its input.
fn attention_layer_gradient(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, heads) = (8, 2);
    let mut layer = AttentionLayerState::random(c, heads, 0.3, rng)?;
    let mut est = ResidualEstimators::zeros(c, 2, true, true);
    for m in [
        &mut est.w_q,
        &mut est.w_k,
        &mut est.w_q_star,
        &mut est.w_k_star,
        &mut est.u_v_star,
        &mut est.v_v_star,
    ] {
        *m = Matrix::random_normal(c, 2, 0.2, rng);
    }
    layer.estimators = Some(est);
    let a = Matrix::random_normal(4, c, 0.5, rng);
    let f = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let (vars, shape) = layer.record(t)?;
        Ok(attention_block(t, v[0], &vars, &shape, Mode::Surrogate)?.out)
    };
    fd_check(&[a], &f, rng)
}

/// Binary score plus the residual polynomials with exact factors
/// reproduces the full-precision `Q Kᵀ`.
fn recovery_suite(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    for i in 0..n {
        let c = rng.random_range(2..=8);
        let seq = rng.random_range(1..=8);
        let wq = Matrix::random_normal(c, c, 0.5, rng);
        let wk = Matrix::random_normal(c, c, 0.5, rng);
        let a = Matrix::random_normal(seq, c, 1.0, rng);
        let qb = binarize_weight(&wq, Granularity::PerRow).values;
        let kb = binarize_weight(&wk, Granularity::PerRow).values;
        let est = ResidualEstimators {
            rank: c,
            w_q: qb.transpose(),
            w_k: kb.transpose(),
            w_q_star: residual(&wq, &qb)?.transpose(),
            w_k_star: residual(&wk, &kb)?.transpose(),
            u_v_star: Matrix::zeros(c, c),
            v_v_star: Matrix::zeros(c, c),
            kq_enabled: true,
            attv_enabled: false,
        };
        let binary = matmul(&matmul(&a, &qb.transpose())?, &matmul(&a, &kb.transpose())?.transpose())?;
        let mut got = score_residual(&a, &est)?;
        got.add_assign(&binary)?;
        let full = matmul(&matmul(&a, &wq.transpose())?, &matmul(&a, &wk.transpose())?.transpose())?;
        let err = got.max_abs_diff(&full);
        if !(err <= 1e-8) {
            return Ok((i + 1, Some(format!("residual recovery error {err:.3e} at C={c}"))));
        }
    }
    Ok((n, None))
}

/// Packed-kernel forward equals the float-simulated forward per logit.
fn agreement_suite(seed: u64, n: usize) -> Outcome {
    let mut checks = 0;
    for variant in [Variant::BipftA, Variant::BipftB] {
        let mut cfg = ModelConfig::tiny(64).with_variant(variant);
        cfg.seed = seed;
        let mut model = build_model(&cfg)?;
        let mut rng = indexed(seed, Stream::Verify, 100 + variant as u64);
        let inputs: Vec<(Vec<usize>, Vec<usize>)> = (0..n)
            .map(|_| {
                let len = rng.random_range(3..=cfg.max_seq.min(24));
                let tokens = (0..len).map(|_| rng.random_range(NUM_SPECIALS..cfg.vocab)).collect();
                let split = rng.random_range(1..len);
                let segments = (0..len).map(|i| usize::from(i >= split)).collect();
                (tokens, segments)
            })
            .collect();
        let batch: Vec<SequenceInput> = inputs
            .iter()
            .map(|(t, s)| SequenceInput { tokens: t, segments: s })
            .collect();
        model.calibrate(&batch)?;
        for (t, s) in &inputs {
            let train = model.forward(t, s, Mode::Train)?;
            let eval = model.forward(t, s, Mode::Eval)?;
            let err = train.mlm_logits.max_abs_diff(&eval.mlm_logits);
            checks += 1;
            if !(err <= 1e-8) {
                return Ok((
                    checks,
                    Some(format!("{variant}: train/eval logits differ by {err:.3e}")),
                ));
            }
        }
    }
    Ok((checks, None))
}

/// Selection near 15%, then 80/10/10 among the selected.
fn masking_suite(seed: u64) -> Outcome {
    let text = crate::pretrain::toy_corpus_text(seed, 50);
    let corpus = Corpus::from_text(&text, 4096)?;
    let vocab = corpus.tokenizer.len();
    let pairs: Vec<NspPair> = corpus
        .documents
        .iter()
        .flatten()
        .map(|s| NspPair {
            tokens: s.clone(),
            segments: vec![0; s.len()],
            is_next: 0,
        })
        .collect();
    let mut stats = crate::pretrain::MaskStats::default();
    let mut round = 0;
    while stats.maskable < 100_000 {
        let b = mask_tokens(&pairs, vocab, &mut indexed(seed, Stream::Mask, round));
        stats.merge(&b.stats);
        round += 1;
    }
    let sel = stats.selected as f64 / stats.maskable as f64;
    let s = stats.selected.max(1) as f64;
    let (m, k, r) = (stats.masked as f64 / s, stats.kept as f64 / s, stats.random as f64 / s);
    let detail = format!(
        "selected {sel:.4}, mask/keep/random {m:.3}/{k:.3}/{r:.3} over {} tokens",
        stats.maskable
    );
    let ok =
        (sel - 0.15).abs() <= 0.005 && (m - 0.8).abs() <= 0.01 && (k - 0.1).abs() <= 0.01 && (r - 0.1).abs() <= 0.01;
    Ok((stats.maskable, if ok { None } else { Some(detail) }))
}
