use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::packed::{tail_mask, PackedBitMatrix};

/// Row-major signed 32-bit accumulator matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.data[i * self.cols + j]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j) as f64)
    }
}

/// Integer accumulators plus the real multiplier applied on readout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledBinaryProduct {
    pub acc: IntMatrix,
    pub scale: f64,
}

impl ScaledBinaryProduct {
    pub fn readout(&self) -> Matrix {
        Matrix::from_fn(self.acc.rows, self.acc.cols, |i, j| {
            self.scale * self.acc.get(i, j) as f64
        })
    }
}

/// ±1 dot product of two packed rows of logical length `n`:
/// `2 · popcount(XNOR(a, b) & mask) − n`.
#[inline]
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n: usize) -> Result<i32> {
    let words = n.div_ceil(64);
    if a.len() != words || b.len() != words {
        return Err(Error::dim("xnor_popcount_dot", (a.len(), n), (b.len(), n)));
    }
    Ok(xnor_dot_unchecked(a, b, n))
}

#[inline]
fn xnor_dot_unchecked(a: &[u64], b: &[u64], n: usize) -> i32 {
    let words = a.len();
    if words == 0 {
        return 0;
    }
    let mut pop = 0u32;
    for w in 0..words - 1 {
        pop += (!(a[w] ^ b[w])).count_ones();
    }
    pop += (!(a[words - 1] ^ b[words - 1]) & tail_mask(n)).count_ones();
    2 * pop as i32 - n as i32
}

/// `2 · popcount(row) − n`: the ±1 dot product of `row` with an all-ones row.
#[inline]
fn ones_dot(row: &[u64], n: usize) -> i32 {
    let pop: u32 = row.iter().map(|w| w.count_ones()).sum();
    2 * pop as i32 - n as i32
}

const PAR_THRESHOLD: usize = 1 << 14;

fn fill_rows(rows: usize, cols: usize, work: usize, f: impl Fn(usize, &mut [i32]) + Sync) -> IntMatrix {
    let mut data = vec![0i32; rows * cols];
    if cols > 0 {
        if work >= PAR_THRESHOLD {
            data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| f(i, out));
        } else {
            data.chunks_mut(cols).enumerate().for_each(|(i, out)| f(i, out));
        }
    }
    IntMatrix { rows, cols, data }
}

/// Integer accumulators of `a · bᵀ` for ±1 matrices; `b_t` is stored transposed.
pub fn binary_gemm_acc(a: &PackedBitMatrix, b_t: &PackedBitMatrix) -> Result<IntMatrix> {
    if a.cols() != b_t.cols() {
        return Err(Error::dim(
            "binary_gemm",
            (a.rows(), a.cols()),
            (b_t.cols(), b_t.rows()),
        ));
    }
    let n = a.cols();
    Ok(fill_rows(
        a.rows(),
        b_t.rows(),
        a.rows() * b_t.rows() * a.words_per_row(),
        |i, out| {
            let ar = a.row(i);
            for (j, o) in out.iter_mut().enumerate() {
                *o = xnor_dot_unchecked(ar, b_t.row(j), n);
            }
        },
    ))
}

pub fn binary_gemm_scaled(a: &PackedBitMatrix, b_t: &PackedBitMatrix, scale: f64) -> Result<ScaledBinaryProduct> {
    Ok(ScaledBinaryProduct {
        acc: binary_gemm_acc(a, b_t)?,
        scale,
    })
}

/// `scale · (A_B ⊗ B_B)` read out as a dense matrix.
pub fn binary_gemm(a: &PackedBitMatrix, b_t: &PackedBitMatrix, scale: f64) -> Result<Matrix> {
    Ok(binary_gemm_scaled(a, b_t, scale)?.readout())
}

/// `{0,1} × {±1}` product via two binary products and a shift.
///
/// `att01` holds the 0/1 map row-major (n × k); `v_t` holds the ±1 operand
/// transposed (m × k). Each output is `(Att_B ⊗ V_B + 1 ⊗ V_B) >> 1`, where
/// `Att_B` reads the same bits as ±1.
pub fn ternary_binary_gemm(att01: &PackedBitMatrix, v_t: &PackedBitMatrix) -> Result<IntMatrix> {
    if att01.cols() != v_t.cols() {
        return Err(Error::dim(
            "ternary_binary_gemm",
            (att01.rows(), att01.cols()),
            (v_t.cols(), v_t.rows()),
        ));
    }
    let n = att01.cols();
    let ones: Vec<i32> = (0..v_t.rows()).map(|j| ones_dot(v_t.row(j), n)).collect();
    Ok(fill_rows(
        att01.rows(),
        v_t.rows(),
        att01.rows() * v_t.rows() * att01.words_per_row(),
        |i, out| {
            let ar = att01.row(i);
            for (j, o) in out.iter_mut().enumerate() {
                *o = (xnor_dot_unchecked(ar, v_t.row(j), n) + ones[j]) >> 1;
            }
        },
    ))
}
