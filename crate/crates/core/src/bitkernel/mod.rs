//! Bit-packed ±1 linear algebra: the inference path of binary linears and
//! binary attention.

mod accounting;
mod gemm;
mod packed;

pub use accounting::{equivalent_flops, parameter_counts, AccountingReport};
pub use gemm::{
    binary_gemm, binary_gemm_acc, binary_gemm_scaled, ternary_binary_gemm, xnor_popcount_dot, IntMatrix,
    ScaledBinaryProduct,
};
pub use packed::{pack_positive, pack_signs, words_for, PackedBitMatrix, WORD_BITS};
