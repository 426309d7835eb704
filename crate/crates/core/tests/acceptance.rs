//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Tolerances are pinned below.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use bitformer::binattn::{score_residual, ResidualEstimators};
use bitformer::bitkernel::{binary_gemm_acc, equivalent_flops, pack_positive, pack_signs, ternary_binary_gemm};
use bitformer::model::{build_model, Granularity, Model, ModelConfig, SequenceInput, Variant};
use bitformer::numerics::Matrix;
use bitformer::pretrain::{
    distill_losses, encode_labeled, evaluate, finetune, mask_tokens, pretrain_loop, toy_classification,
    toy_corpus_text, Corpus, FinetuneConfig, NspPair, StepMetrics, TrainConfig, IGNORE, MASK, NUM_SPECIALS,
};
use bitformer::quant::{binarize_weight, Mode};
use common::*;
use rand::Rng;

const KERNEL_INSTANCES: usize = 500;
const KERNEL_MAX_DIM: usize = 130;
const KERNEL_BUDGET: Duration = Duration::from_secs(10);

const FD_POINTS: usize = 10;
const FD_TOLERANCE: f64 = 1e-4;
const FD_BUDGET: Duration = Duration::from_secs(30);

const RECOVERY_INPUTS: usize = 50;
const RECOVERY_MAX_C: usize = 8;
const RECOVERY_TOLERANCE: f64 = 1e-8;

const AGREEMENT_INPUTS: usize = 20;
const AGREEMENT_TOLERANCE: f64 = 1e-8;

const MASK_MIN_TOKENS: usize = 100_000;
const SELECT_TOLERANCE: f64 = 0.005;
const SPLIT_TOLERANCE: f64 = 0.01;

const FLOPS_TARGET_G: f64 = 0.4;
const FLOPS_TOLERANCE: f64 = 0.15;
const SIZE_TARGET_A_MB: f64 = 14.7;
const SIZE_TARGET_B_MB: f64 = 14.9;
const SIZE_TOLERANCE: f64 = 0.05;
const PARAMS_TARGET: f64 = 110e6;
const PARAMS_TOLERANCE: f64 = 0.02;

const SMOKE_STEPS: u64 = 500;
const SMOKE_WINDOW: usize = 20;
const SMOKE_MIN_DROP: f64 = 0.30;
const SMOKE_BUDGET: Duration = Duration::from_secs(600);
/// Peak LR for the toy-scale runs.
const TOY_LR: f64 = 2e-3;
const TOY_DOCS: usize = 200;

const ECHO_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ECHO_MIN_WINS: usize = 4;
const ECHO_EXAMPLES: usize = 400;
const EVAL_BATCHES: u64 = 8;

struct Outcome {
    pass: bool,
    summary: String,
}

fn outcome(pass: bool, summary: String) -> Outcome {
    Outcome { pass, summary }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn c1_kernel() -> Outcome {
    let mut r = rng(101);
    let start = Instant::now();
    let mut bad = None;
    for i in 0..KERNEL_INSTANCES {
        let (m, k, n) = (
            r.random_range(1..=KERNEL_MAX_DIM),
            r.random_range(1..=KERNEL_MAX_DIM),
            r.random_range(1..=KERNEL_MAX_DIM),
        );
        let (a, b) = (random_bits(m, k, &mut r), random_bits(n, k, &mut r));
        let want = naive_pm1(&a, &b);
        let got = binary_gemm_acc(
            &pack_signs(&bits_to_matrix(&a, 1.0, -1.0)),
            &pack_signs(&bits_to_matrix(&b, 1.0, -1.0)),
        )
        .unwrap();
        let equal = (0..m).all(|x| (0..n).all(|y| got.get(x, y) as i64 == want[x][y]));
        if !equal {
            bad = Some(format!("instance {i} ({m}x{k}x{n})"));
            break;
        }
    }
    let t = start.elapsed();
    let pass = bad.is_none() && t < KERNEL_BUDGET;
    outcome(
        pass,
        format!(
            "{KERNEL_INSTANCES} instances, dims <= {KERNEL_MAX_DIM}, exact match {}, {:.2}s (< {}s)",
            bad.as_deref().map_or("yes".to_string(), |b| format!("NO at {b}")),
            t.as_secs_f64(),
            KERNEL_BUDGET.as_secs()
        ),
    )
}

fn c2_ternary() -> Outcome {
    let mut r = rng(202);
    let mut bad = None;
    for i in 0..KERNEL_INSTANCES {
        let (m, k, n) = (
            r.random_range(1..=KERNEL_MAX_DIM),
            r.random_range(1..=KERNEL_MAX_DIM),
            r.random_range(1..=KERNEL_MAX_DIM),
        );
        let att = random_bits(m, k, &mut r);
        let v = random_bits(k, n, &mut r);
        let got = ternary_binary_gemm(
            &pack_positive(&bits_to_matrix(&att, 1.0, 0.0)),
            &pack_signs(&bits_to_matrix(&v, 1.0, -1.0).transpose()),
        )
        .unwrap();
        let ok = (0..m).all(|x| {
            (0..n).all(|y| {
                let direct: i64 = (0..k)
                    .filter(|&z| att[x][z])
                    .map(|z| if v[z][y] { 1 } else { -1 })
                    .sum();
                got.get(x, y) as i64 == direct
            })
        });
        if !ok {
            bad = Some(format!("instance {i} ({m}x{k}x{n})"));
            break;
        }
    }
    outcome(
        bad.is_none(),
        format!(
            "{KERNEL_INSTANCES} {{0,1}}x{{+-1}} instances, exact match {}",
            bad.as_deref().map_or("yes".to_string(), |b| format!("NO at {b}"))
        ),
    )
}

fn c3_gradients() -> Outcome {
    let mut r = rng(303);
    let start = Instant::now();
    let cases = gradient_cases();
    let mut worst = (0.0f64, "");
    for case in &cases {
        for _ in 0..FD_POINTS {
            let inputs = (case.inputs)(&mut r);
            let e = fd_error(&inputs, &*case.f, &mut r);
            if !(e <= worst.0) {
                worst = (e, case.name);
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worst.0 < FD_TOLERANCE && t < FD_BUDGET,
        format!(
            "{} ops/binarizers x {FD_POINTS} points, worst rel err {:.2e} ({}) < {FD_TOLERANCE:e}, {:.2}s (< {}s)",
            cases.len(),
            worst.0,
            worst.1,
            t.as_secs_f64(),
            FD_BUDGET.as_secs()
        ),
    )
}

fn c4_recovery() -> Outcome {
    let mut r = rng(404);
    let mut worst: f64 = 0.0;
    for _ in 0..RECOVERY_INPUTS {
        let c = r.random_range(2..=RECOVERY_MAX_C);
        let n = r.random_range(1..=8);
        let wq = Matrix::random_normal(c, c, 0.5, &mut r);
        let wk = Matrix::random_normal(c, c, 0.5, &mut r);
        let a = Matrix::random_normal(n, c, 1.0, &mut r);
        let qb = binarize_weight(&wq, Granularity::PerRow).values;
        let kb = binarize_weight(&wk, Granularity::PerRow).values;
        let est = ResidualEstimators {
            rank: c,
            w_q: qb.transpose(),
            w_k: kb.transpose(),
            w_q_star: wq.sub(&qb).unwrap().transpose(),
            w_k_star: wk.sub(&kb).unwrap().transpose(),
            u_v_star: Matrix::zeros(c, c),
            v_v_star: Matrix::zeros(c, c),
            kq_enabled: true,
            attv_enabled: false,
        };
        let q_bin = naive_matmul(&a, &qb.transpose());
        let k_bin = naive_matmul(&a, &kb.transpose());
        let mut got = naive_matmul(&q_bin, &k_bin.transpose());
        got.add_assign(&score_residual(&a, &est).unwrap()).unwrap();
        let q = naive_matmul(&a, &wq.transpose());
        let k = naive_matmul(&a, &wk.transpose());
        let full = naive_matmul(&q, &k.transpose());
        worst = worst.max(got.max_abs_diff(&full));
    }
    outcome(
        worst <= RECOVERY_TOLERANCE,
        format!(
            "{RECOVERY_INPUTS} inputs, rank = C <= {RECOVERY_MAX_C}, max |error| {worst:.2e} <= {RECOVERY_TOLERANCE:e}"
        ),
    )
}

fn random_inputs(vocab: usize, max_len: usize, count: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let len = r.random_range(3..=max_len);
            let split = r.random_range(1..len);
            (
                (0..len).map(|_| r.random_range(NUM_SPECIALS..vocab)).collect(),
                (0..len).map(|i| usize::from(i >= split)).collect(),
            )
        })
        .collect()
}

fn c5_agreement() -> Outcome {
    let mut worst: f64 = 0.0;
    for variant in [Variant::BipftA, Variant::BipftB] {
        let mut cfg = ModelConfig::tiny(120).with_variant(variant);
        cfg.seed = 5;
        let mut model = build_model(&cfg).unwrap();
        let inputs = random_inputs(cfg.vocab, 40, AGREEMENT_INPUTS, 505);
        let batch: Vec<SequenceInput> = inputs
            .iter()
            .map(|(t, s)| SequenceInput { tokens: t, segments: s })
            .collect();
        model.calibrate(&batch).unwrap();
        for (t, s) in &inputs {
            let sim = model.forward(t, s, Mode::Train).unwrap();
            let packed = model.forward(t, s, Mode::Eval).unwrap();
            worst = worst.max(sim.mlm_logits.max_abs_diff(&packed.mlm_logits));
            worst = worst.max((sim.nsp_logits[0] - packed.nsp_logits[0]).abs());
            worst = worst.max((sim.nsp_logits[1] - packed.nsp_logits[1]).abs());
        }
    }
    outcome(
        worst <= AGREEMENT_TOLERANCE,
        format!(
            "{AGREEMENT_INPUTS} inputs x 2 variants (tiny), max |logit diff| {worst:.2e} <= {AGREEMENT_TOLERANCE:e}"
        ),
    )
}

fn c6_masking() -> Outcome {
    let corpus = Corpus::from_text(&toy_corpus_text(6, 100), 4096).unwrap();
    let vocab = corpus.tokenizer.len();
    let pairs: Vec<NspPair> = corpus
        .documents
        .iter()
        .flatten()
        .map(|s| NspPair {
            tokens: s.clone(),
            segments: vec![0; s.len()],
            is_next: 1,
        })
        .collect();
    let (mut eligible, mut selected, mut masked, mut kept, mut random) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut r = rng(606);
    while eligible < MASK_MIN_TOKENS {
        let batch = mask_tokens(&pairs, vocab, &mut r);
        for (p, e) in pairs.iter().zip(&batch.examples) {
            for ((&orig, &now), &label) in p.tokens.iter().zip(&e.tokens).zip(&e.labels) {
                if orig < NUM_SPECIALS {
                    continue;
                }
                eligible += 1;
                if label == IGNORE {
                    continue;
                }
                selected += 1;
                if now == MASK {
                    masked += 1;
                } else if now == orig {
                    kept += 1;
                } else {
                    random += 1;
                }
            }
        }
    }
    let sel = selected as f64 / eligible as f64;
    let s = selected as f64;
    let (m, k, rnd) = (masked as f64 / s, kept as f64 / s, random as f64 / s);
    let pass = (sel - 0.15).abs() <= SELECT_TOLERANCE
        && (m - 0.8).abs() <= SPLIT_TOLERANCE
        && (k - 0.1).abs() <= SPLIT_TOLERANCE
        && (rnd - 0.1).abs() <= SPLIT_TOLERANCE;
    outcome(
        pass,
        format!(
            "{eligible} tokens: selected {:.2}% (15 +- 0.5), mask/keep/random {:.2}/{:.2}/{:.2}% (80/10/10 +- 1)",
            100.0 * sel,
            100.0 * m,
            100.0 * k,
            100.0 * rnd
        ),
    )
}

fn c7_accounting() -> Outcome {
    let a = equivalent_flops(&ModelConfig::base().with_variant(Variant::BipftA));
    let b = equivalent_flops(&ModelConfig::base().with_variant(Variant::BipftB));
    let pass = within(a.equivalent_gflops, FLOPS_TARGET_G, FLOPS_TOLERANCE)
        && within(b.equivalent_gflops, FLOPS_TARGET_G, FLOPS_TOLERANCE)
        && within(a.size_mb, SIZE_TARGET_A_MB, SIZE_TOLERANCE)
        && within(b.size_mb, SIZE_TARGET_B_MB, SIZE_TOLERANCE);
    let convention = a
        .text()
        .lines()
        .find(|l| l.starts_with("convention"))
        .unwrap_or("")
        .to_string();
    outcome(
        pass,
        format!(
            "base: FLOPs A {:.3} G / B {:.3} G (0.4 +- 15%), size A {:.2} MB (14.7 +- 5%) / B {:.2} MB (14.9 +- 5%); {convention}",
            a.equivalent_gflops, b.equivalent_gflops, a.size_mb, b.size_mb
        ),
    )
}

/// BERT-style count by hand: embeddings, per-layer linears and norms.
fn hand_count(c: &ModelConfig) -> u64 {
    let (h, f, l) = (c.hidden as u64, c.ffn_dim as u64, c.layers as u64);
    let emb = (c.vocab as u64 + c.max_seq as u64 + 2) * h + 2 * h;
    let attn = 4 * (h * h + h) + 2 * h;
    let ffn = (h * f + f) + (f * h + h) + 2 * h;
    let binarizers = 2 * (4 + 4 * c.heads as u64);
    let est = if c.variant.has_estimators() {
        6 * h * c.rank as u64
    } else {
        0
    };
    emb + l * (attn + ffn + if c.variant.is_binary() { binarizers } else { 0 } + est)
}

fn c8_params() -> Outcome {
    let base = ModelConfig::base();
    let report = equivalent_flops(&base);
    let hand = hand_count(&base);
    // The closed form must also match a model that is actually built.
    let tiny = ModelConfig::tiny(500).with_variant(Variant::BipftB);
    let built = build_model(&tiny).unwrap().backbone_params() as u64;
    let pass = within(report.total_params as f64, PARAMS_TARGET, PARAMS_TOLERANCE)
        && report.total_params == hand
        && built == hand_count(&tiny);
    outcome(
        pass,
        format!(
            "base backbone {} params ({:.2}M, 110M +- 2%), hand count {hand}, tiny built/hand {built}/{}",
            report.total_params,
            report.total_params as f64 / 1e6,
            hand_count(&tiny)
        ),
    )
}

fn toy_corpus(seed: u64) -> Corpus {
    Corpus::from_text(&toy_corpus_text(seed, TOY_DOCS), 4096).unwrap()
}

fn toy_config(corpus: &Corpus, variant: Variant, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(corpus.tokenizer.len()).with_variant(variant);
    cfg.seed = seed;
    cfg
}

fn pretrain(corpus: &Corpus, variant: Variant, seed: u64) -> (Model, Vec<StepMetrics>, Duration) {
    let mut model = build_model(&toy_config(corpus, variant, seed)).unwrap();
    let tc = TrainConfig {
        steps: SMOKE_STEPS,
        peak_lr: TOY_LR,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let log = pretrain_loop(&mut model, corpus, None, &tc, None).unwrap();
    (model, log, start.elapsed())
}

fn moving_average(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.take(SMOKE_WINDOW).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pretrained bipft-a models by seed, shared by criteria 9 and 10.
type Cache = BTreeMap<u64, Model>;

fn c9_smoke(cache: &mut Cache) -> Outcome {
    let seed = ECHO_SEEDS[0];
    let corpus = toy_corpus(seed);
    let (m1, log, t) = pretrain(&corpus, Variant::BipftA, seed);
    let (m2, log2, _) = pretrain(&corpus, Variant::BipftA, seed);
    let start = moving_average(log.iter().map(|s| s.loss_mlm));
    let end = moving_average(log.iter().rev().map(|s| s.loss_mlm));
    let drop = 1.0 - end / start;
    let identical = m1.params.iter().zip(m2.params.iter()).all(|((_, a), (_, b))| {
        a.value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    }) && log == log2;
    cache.insert(seed, m1);
    outcome(
        drop >= SMOKE_MIN_DROP && identical && t < SMOKE_BUDGET,
        format!(
            "tiny, {SMOKE_STEPS} steps, lr {TOY_LR:e}: MLM {start:.3} -> {end:.3} ({:.1}% drop, need >= 30%), {:.0}s (< 600s), bitwise-identical rerun {}",
            100.0 * drop,
            t.as_secs_f64(),
            if identical { "yes" } else { "NO" }
        ),
    )
}

fn c10_echo(cache: &mut Cache) -> Outcome {
    let mut wins_a = 0;
    let mut wins_b = 0;
    let mut rows = Vec::new();
    for &seed in &ECHO_SEEDS {
        let corpus = toy_corpus(seed);
        let pre = match cache.remove(&seed) {
            Some(m) => m,
            None => pretrain(&corpus, Variant::BipftA, seed).0,
        };
        let (pre_b, _, _) = pretrain(&corpus, Variant::BipftB, seed);
        let loss_a = evaluate(&pre, &corpus, EVAL_BATCHES, 32, seed).unwrap().loss_mlm;
        let loss_b = evaluate(&pre_b, &corpus, EVAL_BATCHES, 32, seed).unwrap().loss_mlm;

        let data = toy_classification(seed, ECHO_EXAMPLES);
        let examples = encode_labeled(&corpus.tokenizer, &data, 64);
        let (train, test) = examples.split_at(ECHO_EXAMPLES * 4 / 5);
        let fc = FinetuneConfig {
            seed,
            ..FinetuneConfig::default()
        };
        let mut tuned = pre;
        let acc_pre = finetune(&mut tuned, train, test, &fc).unwrap().test_acc;
        let mut scratch = build_model(&toy_config(&corpus, Variant::Baseline, seed)).unwrap();
        let acc_scratch = finetune(&mut scratch, train, test, &fc).unwrap().test_acc;

        wins_a += usize::from(acc_pre >= acc_scratch);
        wins_b += usize::from(loss_b <= loss_a);
        rows.push(format!(
            "seed {seed}: acc {acc_pre:.3} vs {acc_scratch:.3}, MLM b {loss_b:.3} vs a {loss_a:.3}"
        ));
    }
    for r in &rows {
        println!("    {r}");
    }
    outcome(
        wins_a >= ECHO_MIN_WINS && wins_b >= ECHO_MIN_WINS,
        format!(
            "(a) pretrained >= scratch accuracy in {wins_a}/5 seeds, (b) bipft-b <= bipft-a held-out MLM in {wins_b}/5 seeds (need >= 4 each)"
        ),
    )
}

fn c11_distill_zero() -> Outcome {
    let corpus = toy_corpus(11);
    let mut cfg = toy_config(&corpus, Variant::Fp, 11);
    cfg.dropout = 0.0;
    let teacher = build_model(&cfg).unwrap();
    let student = teacher.clone();
    let inputs = random_inputs(cfg.vocab, 30, 5, 1111);
    let mut direct = (0.0f64, 0.0f64);
    for (t, s) in &inputs {
        let te = teacher.forward(t, s, Mode::Train).unwrap();
        let st = student.forward(t, s, Mode::Train).unwrap();
        let targets = bitformer::pretrain::DistillTargets {
            logits: te.mlm_logits,
            hidden: te.hidden,
        };
        let (logit, rep) = distill_losses(&st.mlm_logits, &st.hidden, &targets, 1.0).unwrap();
        direct = (direct.0.max(logit.abs()), direct.1.max(rep.abs()));
    }
    let mut trained = student.clone();
    let tc = TrainConfig {
        steps: 1,
        batch_size: 8,
        peak_lr: TOY_LR,
        seed: 11,
        ..TrainConfig::default()
    };
    let step = pretrain_loop(&mut trained, &corpus, Some(&teacher), &tc, None).unwrap()[0];
    let pass = direct == (0.0, 0.0) && step.loss_logit == 0.0 && step.loss_rep == 0.0;
    outcome(
        pass,
        format!(
            "clone of teacher: l_logit {:e}, l_rep {:e} on 5 inputs; in-loop step 0 l_logit {:e}, l_rep {:e} (must be exactly 0)",
            direct.0, direct.1, step.loss_logit, step.loss_rep
        ),
    )
}

fn main() {
    let mut cache = Cache::new();
    let criteria: Vec<(&str, Box<dyn FnMut() -> Outcome + '_>)> = vec![
        ("1 kernel-oracle equivalence", Box::new(c1_kernel)),
        ("2 ternary-to-binary identity", Box::new(c2_ternary)),
        ("3 surrogate-gradient checks", Box::new(c3_gradients)),
        ("4 residual-polynomial recovery", Box::new(c4_recovery)),
        ("5 train/eval path agreement", Box::new(c5_agreement)),
        ("6 masking statistics", Box::new(c6_masking)),
        ("7 accounting reproduction", Box::new(c7_accounting)),
        ("8 parameter-count reproduction", Box::new(c8_params)),
    ];
    let mut failed = 0;
    let mut run = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {name}: {} [{:.1}s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.summary
        );
    };
    for (name, mut f) in criteria {
        run(name, &mut *f);
    }
    run("9 training smoke", &mut || c9_smoke(&mut cache));
    run("10 directional echo", &mut || c10_echo(&mut cache));
    run("11 distillation zero-point", &mut c11_distill_zero);
    println!("acceptance: {} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
