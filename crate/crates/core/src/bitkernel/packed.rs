use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_for(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

/// Mask selecting the logical bits of the last word of a row.
#[inline]
pub fn tail_mask(cols: usize) -> u64 {
    match cols % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Sign bits packed row-major into 64-bit words.
///
/// Bit `j % 64` of word `j / 64` in row `i` is 1 for +1 and 0 for −1 (or for
/// 1 and 0 when the matrix carries a `{0, 1}` attention map). Padding bits
/// past `cols` are always 0.
#[derive(Clone, PartialEq, Eq)]
pub struct PackedBitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl PackedBitMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        let words_per_row = words_for(cols);
        Self {
            rows,
            cols,
            words_per_row,
            bits: vec![0; rows * words_per_row],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut bit: impl FnMut(usize, usize) -> bool) -> Self {
        let mut out = Self::new(rows, cols);
        for i in 0..rows {
            let row = &mut out.bits[i * out.words_per_row..(i + 1) * out.words_per_row];
            for j in 0..cols {
                if bit(i, j) {
                    row[j / WORD_BITS] |= 1u64 << (j % WORD_BITS);
                }
            }
        }
        out
    }

    /// Builds from raw words, zeroing any padding bits.
    pub fn from_words(rows: usize, cols: usize, mut bits: Vec<u64>) -> Result<Self> {
        let wpr = words_for(cols);
        if bits.len() != rows * wpr {
            return Err(Error::dim("PackedBitMatrix::from_words", (rows, wpr), (bits.len(), 1)));
        }
        if wpr > 0 {
            let mask = tail_mask(cols);
            for i in 0..rows {
                bits[i * wpr + wpr - 1] &= mask;
            }
        }
        Ok(Self {
            rows,
            cols,
            words_per_row: wpr,
            bits,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        (self.row(i)[j / WORD_BITS] >> (j % WORD_BITS)) & 1 == 1
    }

    /// Decodes to a ±1 matrix.
    pub fn unpack(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| if self.get(i, j) { 1.0 } else { -1.0 })
    }

    /// Decodes to a {0, 1} matrix.
    pub fn unpack01(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| if self.get(i, j) { 1.0 } else { 0.0 })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Storage bytes of the bit payload.
    pub fn byte_len(&self) -> usize {
        self.bits.len() * 8
    }
}

impl std::fmt::Debug for PackedBitMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "PackedBitMatrix({}x{}, {} words/row)",
            self.rows, self.cols, self.words_per_row
        )
    }
}

/// Packs `m[i,j] >= 0` as 1, everything else as 0.
pub fn pack_signs(m: &Matrix) -> PackedBitMatrix {
    PackedBitMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] >= 0.0)
}

/// Packs `m[i,j] > 0` as 1; used for `{0, α}` attention maps.
pub fn pack_positive(m: &Matrix) -> PackedBitMatrix {
    PackedBitMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] > 0.0)
}
