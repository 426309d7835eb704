mod common;

use bitformer::binattn::{attention_block, AttentionLayerState, ResidualEstimators};
use bitformer::model::{build_model, ForwardOptions, Model, ModelConfig, SequenceInput, Variant};
use bitformer::numerics::{Matrix, Tape, Var};
use bitformer::quant::Mode;
use common::*;
use rand::Rng;

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_case_matches_finite_differences() {
    let mut r = rng(31);
    let mut failures = Vec::new();
    for case in gradient_cases() {
        for point in 0..4 {
            let inputs = (case.inputs)(&mut r);
            let e = fd_error(&inputs, &*case.f, &mut r);
            if !(e < TOLERANCE) {
                failures.push(format!("{} point {point}: {e:.3e}", case.name));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn attention_sublayer_matches_finite_differences() {
    let mut r = rng(32);
    let (c, heads) = (8, 2);
    let mut layer = AttentionLayerState::random(c, heads, 0.4, &mut r).unwrap();
    let mut est = ResidualEstimators::zeros(c, 2, true, true);
    for f in [
        &mut est.w_q,
        &mut est.w_k,
        &mut est.w_q_star,
        &mut est.w_k_star,
        &mut est.u_v_star,
        &mut est.v_v_star,
    ] {
        *f = Matrix::random_normal(f.rows(), f.cols(), 0.3, &mut r);
    }
    layer.estimators = Some(est);
    // differentiate through the input only; the layer state is fixed
    let a = avoiding(5, c, -0.9, 0.9, &[], &mut r);
    let build = move |t: &mut Tape, v: &[Var]| {
        let (vars, shape) = layer.record(t)?;
        Ok(attention_block(t, v[0], &vars, &shape, Mode::Surrogate)?.out)
    };
    let e = fd_error(&[a], &build, &mut r);
    assert!(e < TOLERANCE, "relative error {e:.3e}");
}

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        ffn_dim: 16,
        max_seq: 8,
        rank: 2,
        init_std: 0.3,
        ..ModelConfig::tiny(20).with_variant(variant)
    }
}

fn loss(model: &Model, tape: &mut Tape, vars: &[Var], tokens: &[usize], segments: &[usize]) -> Var {
    let out = model
        .forward_tape(
            tape,
            vars,
            &SequenceInput { tokens, segments },
            &mut ForwardOptions::mode(Mode::Surrogate),
        )
        .unwrap();
    let mlm = tape.cross_entropy(out.mlm_logits, tokens, None).unwrap();
    let nsp = tape.cross_entropy(out.nsp_logits, &[1], None).unwrap();
    tape.add(mlm, nsp).unwrap()
}

/// Central differences on a sample of every parameter tensor of a small
/// model, compared with one backward pass.
fn whole_model_check(variant: Variant) {
    let mut model = build_model(&small_config(variant)).unwrap();
    let tokens = [5, 9, 3, 17, 11, 6];
    let segments = [0, 0, 0, 1, 1, 1];
    model
        .calibrate(&[SequenceInput {
            tokens: &tokens,
            segments: &segments,
        }])
        .unwrap();
    let mut tape = Tape::new();
    let vars = model.record(&mut tape);
    let l = loss(&model, &mut tape, &vars, &tokens, &segments);
    let grads = tape.backward(l).unwrap();

    let eval = |m: &Model| {
        let mut t = Tape::new();
        let v = m.record(&mut t);
        let l = loss(m, &mut t, &v, &tokens, &segments);
        t.scalar(l)
    };
    let mut r = rng(33);
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0, 0.0);
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = model.params.value(id).len();
        for _ in 0..3 {
            let e = r.random_range(0..n);
            let mut probe = model.clone();
            let orig = probe.params.value(id).data()[e];
            probe.params.value_mut(id).data_mut()[e] = orig + h;
            let up = eval(&probe);
            probe.params.value_mut(id).data_mut()[e] = orig - h;
            let down = eval(&probe);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(vars[id.0]).map_or(0.0, |g| g.data()[e]);
            diff += (numeric - analytic).powi(2);
            norm += numeric.powi(2).max(analytic.powi(2));
        }
    }
    let rel = (diff / norm).sqrt();
    assert!(rel < TOLERANCE, "{variant:?}: relative error {rel:.3e}");
}

#[test]
fn whole_model_gradient_bipft_a() {
    whole_model_check(Variant::BipftA);
}

#[test]
fn whole_model_gradient_bipft_b() {
    whole_model_check(Variant::BipftB);
}

#[test]
fn whole_model_gradient_full_precision() {
    whole_model_check(Variant::Fp);
}
