//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here is a pure function over [`Matrix`]; the tape in
//! [`super::tape`] wires these together for reverse-mode differentiation.

use crate::error::{Error, Result};

use super::Matrix;

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    let bd = b.data();
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &aik) in arow.iter().enumerate().take(k) {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::dim("matmul_bt", a.shape(), b.shape()));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[(i, j)] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::dim("matmul_at", a.shape(), b.shape()));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// VJP of row softmax given its output `y` and upstream gradient `g`.
pub fn softmax_rows_backward(y: &Matrix, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let (yr, gr) = (y.row(i), g.row(i));
        let s = dot(yr, gr);
        for (o, (&yv, &gv)) in out.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
            *o = yv * (gv - s);
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Saved state of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(m: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<(Matrix, LayerNormCache)> {
    if gamma.len() != m.cols() || beta.len() != m.cols() {
        return Err(Error::dim("layer_norm", m.shape(), (gamma.len(), beta.len())));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let n = m.cols() as f64;
    let mut xhat = Matrix::zeros(m.rows(), m.cols());
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut inv_std = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = m.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..m.cols() {
            let xh = (row[j] - mean) * is;
            xhat[(i, j)] = xh;
            out[(i, j)] = gamma[j] * xh + beta[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &[f64], g: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (rows, cols) = g.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for i in 0..rows {
        let gr = g.row(i);
        let xr = cache.xhat.row(i);
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..cols {
            dgamma[j] += gr[j] * xr[j];
            dbeta[j] += gr[j];
            dxhat[j] = gr[j] * gamma[j];
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xr[j];
        }
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is / n * (n * dxhat[j] - sum_d - xr[j] * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GeLU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(m: &Matrix) -> Matrix {
    m.map(gelu_scalar)
}

/// Mean cross-entropy over rows whose target is not `ignore_index`.
///
/// Returns the loss and the gradient with respect to the logits. With no
/// counted rows the loss is 0 and the gradient is all zeros.
pub fn cross_entropy(logits: &Matrix, targets: &[usize], ignore_index: Option<usize>) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::dim("cross_entropy", logits.shape(), (targets.len(), 1)));
    }
    let classes = logits.cols();
    let mut counted = 0usize;
    for &t in targets {
        if Some(t) == ignore_index {
            continue;
        }
        if t >= classes {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: t,
                limit: classes,
            });
        }
        counted += 1;
    }
    let mut grad = Matrix::zeros(logits.rows(), classes);
    if counted == 0 {
        return Ok((0.0, grad));
    }
    let logp = log_softmax_rows(logits);
    let inv = 1.0 / counted as f64;
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if Some(t) == ignore_index {
            continue;
        }
        loss -= logp[(i, t)];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = logp[(i, j)].exp() * inv;
        }
        grad[(i, t)] -= inv;
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_cancellation() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        let r = matmul(&Matrix::from_rows(&[[1.0, -1.0]]), &Matrix::from_rows(&[[1.0], [1.0]])).unwrap();
        assert_eq!(r, Matrix::from_rows(&[[0.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::random_normal(5, 7, 1.0, &mut rng);
        let b = Matrix::random_normal(7, 3, 1.0, &mut rng);
        let want = naive_matmul(&a, &b);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&want) <= 1e-12);
        assert!(matmul_bt(&a, &b.transpose()).unwrap().max_abs_diff(&want) <= 1e-12);
        assert!(matmul_at(&a.transpose(), &b).unwrap().max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]]));
        for j in 0..3 {
            assert!((s[(0, j)] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s[(1, 0)] - 1.0).abs() < 1e-9);
        assert!(s[(1, 1)] < 1e-9);

        let s = softmax_rows(&Matrix::from_rows(&[[1.0, 2.0, 3.0]]));
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s[(0, j)] - x.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let (y, _) = layer_norm(&Matrix::from_rows(&[[3.0, 3.0, 3.0]]), &[1.0; 3], &[0.0; 3], 1e-12).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (y, _) = layer_norm(&Matrix::from_rows(&[[1.0, -1.0]]), &[1.0; 2], &[0.0; 2], 1e-14).unwrap();
        assert!((y[(0, 0)] - 1.0).abs() < 1e-12 && (y[(0, 1)] + 1.0).abs() < 1e-12);
        assert!(layer_norm(&Matrix::zeros(1, 2), &[1.0], &[0.0, 0.0], 1e-5).is_err());
        assert!(layer_norm(&Matrix::zeros(1, 2), &[1.0; 2], &[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_cases() {
        let (loss, _) = cross_entropy(&Matrix::zeros(3, 7), &[0, 3, 6], None).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);

        let (loss, g) = cross_entropy(&Matrix::zeros(2, 4), &[9, 9], Some(9)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        assert!(matches!(
            cross_entropy(&Matrix::zeros(1, 4), &[4], None),
            Err(Error::Index { .. })
        ));
    }
}
