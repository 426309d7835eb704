//! Operation and storage accounting for a model configuration.
//!
//! Conventions (printed with every report):
//! * one multiply-accumulate is 2 FLOPs;
//! * a 1-bit MAC costs 1/64 of a full-precision MAC;
//! * the `{0,1} × {±1}` value product costs two binary MACs per MAC;
//! * every readout of a binary product costs one FP multiply (scale fusion);
//! * embeddings cost one FP multiply per scaled lookup plus two adds per element;
//! * norms, softmax, GeLU and residual adds are not counted;
//! * 1-bit parameters take 1/32 of the bytes of an `f32` parameter;
//! * MB is 10^6 bytes; pretraining heads (MLM, NSP) are reported separately
//!   and excluded from size and FLOPs.

use std::fmt::Write as _;

use crate::model::{ModelConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct AccountingReport {
    pub variant: Variant,
    pub seq_len: usize,
    pub binary_macs: u64,
    pub fp_macs: u64,
    pub fp_elementwise: u64,
    /// Equivalent GFLOPs under the conventions above.
    pub equivalent_gflops: f64,
    /// GFLOPs of the same network with every product in full precision.
    pub full_precision_gflops: f64,
    pub binary_params: u64,
    pub fp_params: u64,
    /// Trainable backbone parameters (embeddings + encoder, no heads).
    pub total_params: u64,
    pub head_params: u64,
    pub size_mb: f64,
    pub fp32_size_mb: f64,
}

impl AccountingReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant              {}", self.variant);
        let _ = writeln!(s, "sequence length      {}", self.seq_len);
        let _ = writeln!(s, "binary MACs          {}", self.binary_macs);
        let _ = writeln!(s, "full-precision MACs  {}", self.fp_macs);
        let _ = writeln!(s, "fp elementwise ops   {}", self.fp_elementwise);
        let _ = writeln!(s, "equivalent GFLOPs    {:.4}", self.equivalent_gflops);
        let _ = writeln!(s, "all-fp GFLOPs        {:.4}", self.full_precision_gflops);
        let _ = writeln!(s, "backbone params      {}", self.total_params);
        let _ = writeln!(s, "  1-bit              {}", self.binary_params);
        let _ = writeln!(s, "  full precision     {}", self.fp_params);
        let _ = writeln!(s, "head params (excl.)  {}", self.head_params);
        let _ = writeln!(s, "size MB              {:.3}", self.size_mb);
        let _ = writeln!(s, "fp32 size MB         {:.3}", self.fp32_size_mb);
        let _ = writeln!(s, "convention: MAC=2 FLOPs; 1-bit MAC=1/64; ternary AttV=2 binary MACs; readout scale=1 FLOP; 1-bit param=1/32 f32; MB=1e6 bytes; norms/softmax/GeLU uncounted; MLM/NSP heads excluded");
        s
    }

    /// `metric=value` lines for scripts.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.variant);
        let _ = writeln!(s, "seq_len={}", self.seq_len);
        let _ = writeln!(s, "binary_macs={}", self.binary_macs);
        let _ = writeln!(s, "fp_macs={}", self.fp_macs);
        let _ = writeln!(s, "fp_elementwise={}", self.fp_elementwise);
        let _ = writeln!(s, "equivalent_gflops={:.6}", self.equivalent_gflops);
        let _ = writeln!(s, "full_precision_gflops={:.6}", self.full_precision_gflops);
        let _ = writeln!(s, "total_params={}", self.total_params);
        let _ = writeln!(s, "binary_params={}", self.binary_params);
        let _ = writeln!(s, "fp_params={}", self.fp_params);
        let _ = writeln!(s, "head_params={}", self.head_params);
        let _ = writeln!(s, "size_mb={:.6}", self.size_mb);
        let _ = writeln!(s, "fp32_size_mb={:.6}", self.fp32_size_mb);
        s
    }
}

/// Closed-form parameter counts: `(binary, fp_trainable, fp_derived, heads)`.
///
/// `fp_derived` are the per-row weight scales that exist only in the
/// deployed 1-bit model; they are not trainable parameters.
pub fn parameter_counts(c: &ModelConfig) -> (u64, u64, u64, u64) {
    let (l, h, f, v, s) = (
        c.layers as u64,
        c.hidden as u64,
        c.ffn_dim as u64,
        c.vocab as u64,
        c.max_seq as u64,
    );
    let heads = c.heads as u64;
    let emb_rows = v + s + 2;
    let emb = emb_rows * h;
    let linear_w = 4 * h * h + 2 * h * f;
    let biases = 4 * h + f + h;
    let norms = 2 * 2 * h;
    let weight_scales = 4 * h + f + h;
    // input binarizers of QKV, output proj, FFN in, FFN mid + per-head q, k, v, map
    let binarizers = if c.variant.is_binary() { 2 * (4 + 4 * heads) } else { 0 };
    let est = if c.variant.has_estimators() {
        6 * h * c.rank as u64
    } else {
        0
    };

    let binary = emb + l * linear_w;
    let mut fp = 2 * h + l * (biases + norms + binarizers + est);
    let mut derived = emb_rows + l * weight_scales;
    if !c.variant.is_binary() {
        fp += binary;
        derived = 0;
    }
    let heads_params = h * v + v + 2 * h + 2;
    (
        if c.variant.is_binary() { binary } else { 0 },
        fp,
        derived,
        heads_params,
    )
}

pub fn equivalent_flops(c: &ModelConfig) -> AccountingReport {
    let n = c.max_seq as u64;
    let h = c.hidden as u64;
    let f = c.ffn_dim as u64;
    let heads = c.heads as u64;
    let l = c.layers as u64;
    let r = c.rank as u64;

    let linear_macs = n * (4 * h * h + 2 * h * f);
    let qk_macs = n * n * h;
    let av_macs = n * n * h;
    let readouts = n * (5 * h + f) + heads * n * n + n * h;

    let mut est_macs = 0;
    if c.kq_enabled() {
        est_macs += 4 * n * h * r + 3 * n * n * r;
    }
    if c.attv_enabled() {
        est_macs += n * h * r + heads * n * n * r + n * h * r;
    }

    let embedding_ops = 5 * n * h;
    let full_macs = l * (linear_macs + qk_macs + av_macs + est_macs);
    let full_precision_gflops = (2 * full_macs + embedding_ops) as f64 / 1e9;

    let (binary_macs, fp_macs, fp_elementwise) = if c.variant.is_binary() {
        (
            l * (linear_macs + qk_macs + 2 * av_macs),
            l * est_macs,
            l * readouts + embedding_ops,
        )
    } else {
        (0, full_macs, embedding_ops)
    };
    let equivalent_gflops = (2.0 * (binary_macs as f64 / 64.0 + fp_macs as f64) + fp_elementwise as f64) / 1e9;

    let (binary_params, fp_params, derived, head_params) = parameter_counts(c);
    let total_params = binary_params + fp_params;
    let size_bytes = binary_params as f64 / 8.0 + 4.0 * (fp_params + derived) as f64;
    AccountingReport {
        variant: c.variant,
        seq_len: c.max_seq,
        binary_macs,
        fp_macs,
        fp_elementwise,
        equivalent_gflops,
        full_precision_gflops,
        binary_params,
        fp_params,
        total_params,
        head_params,
        size_mb: size_bytes / 1e6,
        fp32_size_mb: 4.0 * total_params as f64 / 1e6,
    }
}
