//! Oracles shared by the integration tests: a finite-difference gradient
//! checker, naive integer products and the gradient case list.
#![allow(dead_code)]

use bitformer::binattn::{binary_att_values, binary_scores, BinarizerVars};
use bitformer::model::Granularity;
use bitformer::numerics::{Matrix, Tape, Var};
use bitformer::pretrain::{kl_op, mse_op};
use bitformer::quant::{attention_op, binary_linear, elastic_op, weight_op, Mode};
use bitformer::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn weighted_sum(out: &Matrix, r: &Matrix) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst norm-wise relative error between the tape gradient and a central
/// difference of `Σ f(x) ⊙ R` over every input entry.
pub fn fd_error(inputs: &[Matrix], f: &Build, r: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let (rows, cols) = tape.value(out).shape();
    let w = Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
    let grads = tape.backward_with(out, w.clone()).unwrap();
    let eval = |xs: &[Matrix]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|m| t.leaf(m.clone())).collect();
        let o = f(&mut t, &vs).unwrap();
        weighted_sum(t.value(o), &w)
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for e in 0..x.len() {
            let orig = x.data()[e];
            xs[i].data_mut()[e] = orig + h;
            let up = eval(&xs);
            xs[i].data_mut()[e] = orig - h;
            let down = eval(&xs);
            xs[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(vars[i]).map_or(0.0, |g| g.data()[e]);
            diff += (numeric - analytic).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

/// Entries uniform in `[lo, hi)` at least `margin` from every kink.
pub fn avoiding(rows: usize, cols: usize, lo: f64, hi: f64, kinks: &[f64], r: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| loop {
        let v = r.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > 1e-3) {
            break v;
        }
    })
}

/// Latent weights away from `|w| = 0` and `|w - mean| ∈ {0, 1}`, with the
/// mean taken per row (or over everything when `whole`).
pub fn smooth_weights(rows: usize, cols: usize, whole: bool, r: &mut ChaCha8Rng) -> Matrix {
    loop {
        let w = avoiding(rows, cols, -0.8, 0.8, &[0.0], r);
        let mean = |i: usize| {
            if whole {
                w.data().iter().sum::<f64>() / w.len() as f64
            } else {
                w.row(i).iter().sum::<f64>() / cols as f64
            }
        };
        let ok = (0..rows).all(|i| {
            let m = mean(i);
            w.row(i).iter().all(|v| {
                let c = (v - m).abs();
                c > 1e-3 && (c - 1.0).abs() > 1e-3
            })
        });
        if ok {
            return w;
        }
    }
}

pub struct Case {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Matrix>,
    pub f: Box<Build>,
}

fn normal(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, r)
}

fn bz(v: &[Var], i: usize) -> BinarizerVars {
    BinarizerVars {
        alpha: v[i],
        beta: v[i + 1],
    }
}

fn teacher(rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| ((3 * i + 5 * j) as f64).cos())
}

fn s(v: f64) -> Matrix {
    Matrix::scalar(v)
}

/// Every differentiable op and binarizer, with kink-free input draws.
pub fn gradient_cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            inputs: |r| vec![normal(3, 4, r), normal(4, 2, r)],
            f: Box::new(|t, v| t.matmul(v[0], v[1])),
        },
        Case {
            name: "matmul_bt",
            inputs: |r| vec![normal(3, 4, r), normal(2, 4, r)],
            f: Box::new(|t, v| t.matmul_bt(v[0], v[1])),
        },
        Case {
            name: "add",
            inputs: |r| vec![normal(2, 3, r), normal(2, 3, r)],
            f: Box::new(|t, v| t.add(v[0], v[1])),
        },
        Case {
            name: "sub",
            inputs: |r| vec![normal(2, 3, r), normal(2, 3, r)],
            f: Box::new(|t, v| t.sub(v[0], v[1])),
        },
        Case {
            name: "mul",
            inputs: |r| vec![normal(2, 3, r), normal(2, 3, r)],
            f: Box::new(|t, v| t.mul(v[0], v[1])),
        },
        Case {
            name: "scale",
            inputs: |r| vec![normal(2, 3, r)],
            f: Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
        },
        Case {
            name: "add_row",
            inputs: |r| vec![normal(3, 4, r), normal(1, 4, r)],
            f: Box::new(|t, v| t.add_row(v[0], v[1])),
        },
        Case {
            name: "softmax_rows",
            inputs: |r| vec![normal(3, 5, r)],
            f: Box::new(|t, v| Ok(t.softmax_rows(v[0]))),
        },
        Case {
            name: "layer_norm",
            inputs: |r| vec![normal(3, 6, r), normal(1, 6, r), normal(1, 6, r)],
            f: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-12)),
        },
        Case {
            name: "gelu",
            inputs: |r| vec![normal(3, 4, r)],
            f: Box::new(|t, v| Ok(t.gelu(v[0]))),
        },
        Case {
            name: "cross_entropy",
            inputs: |r| vec![normal(4, 5, r)],
            f: Box::new(|t, v| t.cross_entropy(v[0], &[1, usize::MAX, 4, 0], Some(usize::MAX))),
        },
        Case {
            name: "slice_cols",
            inputs: |r| vec![normal(3, 6, r)],
            f: Box::new(|t, v| t.slice_cols(v[0], 2, 3)),
        },
        Case {
            name: "slice_rows",
            inputs: |r| vec![normal(5, 3, r)],
            f: Box::new(|t, v| t.slice_rows(v[0], 1, 3)),
        },
        Case {
            name: "concat_cols",
            inputs: |r| vec![normal(3, 2, r), normal(3, 4, r)],
            f: Box::new(|t, v| t.concat_cols(&[v[1], v[0]])),
        },
        Case {
            name: "gather_rows",
            inputs: |r| vec![normal(4, 3, r)],
            f: Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3, 1])),
        },
        Case {
            name: "sum",
            inputs: |r| vec![normal(3, 3, r)],
            f: Box::new(|t, v| Ok(t.sum(v[0]))),
        },
        Case {
            name: "mean",
            inputs: |r| vec![normal(3, 3, r)],
            f: Box::new(|t, v| Ok(t.mean(v[0]))),
        },
        Case {
            name: "dropout",
            inputs: |r| vec![normal(2, 4, r)],
            f: Box::new(|t, v| {
                t.dropout(
                    v[0],
                    Matrix::from_rows(&[[0.0, 1.25, 1.25, 1.25], [1.25, 0.0, 0.0, 1.25]]),
                )
            }),
        },
        Case {
            name: "binarize_weight_per_row",
            inputs: |r| vec![smooth_weights(3, 5, false, r)],
            f: Box::new(|t, v| Ok(weight_op(t, v[0], Granularity::PerRow, Mode::Surrogate))),
        },
        Case {
            name: "binarize_weight_per_tensor",
            inputs: |r| vec![smooth_weights(3, 4, true, r)],
            f: Box::new(|t, v| Ok(weight_op(t, v[0], Granularity::PerTensor, Mode::Surrogate))),
        },
        Case {
            name: "binarize_activation",
            inputs: |r| {
                let beta = r.random_range(-0.3..0.3);
                vec![
                    avoiding(3, 4, -2.0, 2.0, &[beta - 1.0, beta + 1.0], r),
                    s(r.random_range(0.5..1.5)),
                    s(beta),
                ]
            },
            f: Box::new(|t, v| elastic_op(t, v[0], v[1], v[2], Mode::Surrogate)),
        },
        Case {
            name: "binarize_attention",
            inputs: |r| {
                let (alpha, beta) = (r.random_range(0.3..0.8), r.random_range(-0.1..0.1));
                vec![avoiding(3, 4, -0.2, 1.0, &[beta, beta + alpha], r), s(alpha), s(beta)]
            },
            f: Box::new(|t, v| attention_op(t, v[0], v[1], v[2], Mode::Surrogate)),
        },
        Case {
            name: "binary_linear",
            inputs: |r| {
                let beta = r.random_range(-0.2..0.2);
                vec![
                    avoiding(3, 5, -2.0, 2.0, &[beta - 1.0, beta + 1.0], r),
                    s(r.random_range(0.5..1.5)),
                    s(beta),
                    smooth_weights(4, 5, false, r),
                ]
            },
            f: Box::new(|t, v| binary_linear(t, v[0], v[1], v[2], v[3], Granularity::PerRow, Mode::Surrogate)),
        },
        Case {
            name: "binary_scores",
            inputs: |r| {
                let k = [-1.0, 1.0];
                vec![
                    avoiding(3, 4, -2.0, 2.0, &k, r),
                    s(r.random_range(0.5..1.5)),
                    s(0.0),
                    avoiding(5, 4, -2.0, 2.0, &k, r),
                    s(r.random_range(0.5..1.5)),
                    s(0.0),
                ]
            },
            f: Box::new(|t, v| binary_scores(t, v[0], bz(v, 1), v[3], bz(v, 4), Mode::Surrogate)),
        },
        Case {
            name: "binary_att_values",
            inputs: |r| {
                vec![
                    avoiding(3, 4, 0.0, 1.0, &[0.0, 0.6], r),
                    s(0.6),
                    s(0.0),
                    avoiding(4, 2, -2.0, 2.0, &[-1.0, 1.0], r),
                    s(r.random_range(0.5..1.5)),
                    s(0.0),
                ]
            },
            f: Box::new(|t, v| binary_att_values(t, v[0], bz(v, 1), v[3], bz(v, 4), Mode::Surrogate)),
        },
        Case {
            name: "kl_distill",
            inputs: |r| vec![normal(3, 5, r)],
            f: Box::new(|t, v| kl_op(t, v[0], &teacher(3, 5), 1.5)),
        },
        Case {
            name: "mse_distill",
            inputs: |r| vec![normal(3, 4, r)],
            f: Box::new(|t, v| mse_op(t, v[0], &teacher(3, 4))),
        },
    ]
}

/// ±1 product of two bit matrices by plain integer loops.
pub fn naive_pm1(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<i64>> {
    let pm = |x: bool| if x { 1i64 } else { -1 };
    a.iter()
        .map(|ar| {
            b.iter()
                .map(|br| ar.iter().zip(br).map(|(&x, &y)| pm(x) * pm(y)).sum())
                .collect()
        })
        .collect()
}

pub fn random_bits(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_bool(0.5)).collect())
        .collect()
}

pub fn bits_to_matrix(bits: &[Vec<bool>], on: f64, off: f64) -> Matrix {
    let cols = bits.first().map_or(0, Vec::len);
    Matrix::from_fn(bits.len(), cols, |i, j| if bits[i][j] { on } else { off })
}

/// Plain triple-loop product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
    })
}
