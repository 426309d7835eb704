mod common;

use bitformer::model::{build_model, Model, ModelConfig, SequenceInput, Variant};
use bitformer::pretrain::{
    accuracy, encode_labeled, finetune, make_nsp_pairs, pretrain_loop, total_loss, toy_classification, toy_corpus_text,
    Corpus, FinetuneConfig, LabeledExample, LossFlags, TrainConfig, METRICS_HEADER,
};
use bitformer::Error;
use common::rng;
use proptest::prelude::*;

fn corpus() -> Corpus {
    Corpus::from_text(&toy_corpus_text(7, 60), 4096).unwrap()
}

fn model(corpus: &Corpus, variant: Variant) -> Model {
    let mut cfg = ModelConfig::tiny(corpus.tokenizer.len()).with_variant(variant);
    cfg.seed = 7;
    cfg.dropout = 0.1;
    build_model(&cfg).unwrap()
}

fn short(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        peak_lr: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

fn same_params(a: &Model, b: &Model) -> bool {
    a.params.iter().zip(b.params.iter()).all(|((_, x), (_, y))| {
        x.name == y.name
            && x.value
                .data()
                .iter()
                .zip(y.value.data())
                .all(|(p, q)| p.to_bits() == q.to_bits())
    })
}

#[test]
fn nsp_pairs_are_balanced() {
    let c = corpus();
    let pairs = make_nsp_pairs(&c, 1000, 64, &mut rng(1)).unwrap();
    let pos = pairs.iter().filter(|p| p.is_next == 1).count() as f64 / 1000.0;
    assert!((pos - 0.5).abs() <= 0.03, "positive fraction {pos}");
    assert!(pairs
        .iter()
        .all(|p| p.tokens.len() <= 64 && p.tokens.len() == p.segments.len()));
}

#[test]
fn single_document_corpus_cannot_make_negatives() {
    let c = Corpus::from_text("a b c . d e f .\nx y z .", 100).unwrap();
    assert!(matches!(make_nsp_pairs(&c, 4, 32, &mut rng(1)), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn total_loss_adds_its_terms(m in 0.0f64..10.0, n in 0.0f64..10.0, r in 0.0f64..10.0, l in 0.0f64..10.0) {
        prop_assert_eq!(total_loss(m, n, r, l, LossFlags { distill: true }), m + n + r + l);
        prop_assert_eq!(total_loss(m, n, r, l, LossFlags { distill: false }), m + n);
    }
}

#[test]
fn zero_steps_change_nothing() {
    let c = corpus();
    let mut m = model(&c, Variant::BipftA);
    let (t, s) = ([1usize, 8, 9, 2], [0usize, 0, 0, 0]);
    m.calibrate(&[SequenceInput {
        tokens: &t,
        segments: &s,
    }])
    .unwrap();
    let before = m.clone();
    let log = pretrain_loop(&mut m, &c, None, &short(0, 1), None).unwrap();
    assert!(log.is_empty());
    assert!(same_params(&before, &m));
}

#[test]
fn same_seed_is_bitwise_reproducible() {
    let c = corpus();
    let run = |seed| {
        let mut m = model(&c, Variant::BipftB);
        let log = pretrain_loop(&mut m, &c, None, &short(4, seed), None).unwrap();
        (m, log)
    };
    let (m1, l1) = run(3);
    let (m2, l2) = run(3);
    let (m3, l3) = run(4);
    assert_eq!(l1, l2);
    assert!(same_params(&m1, &m2));
    assert_ne!(l1, l3);
    assert!(!same_params(&m1, &m3));
}

#[test]
fn metrics_log_has_header_and_one_line_per_step() {
    let c = corpus();
    let mut m = model(&c, Variant::BipftA);
    let mut buf = Vec::new();
    let log = pretrain_loop(&mut m, &c, None, &short(3, 1), Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1], log[0].tsv());
    assert!(log.iter().all(|s| s.loss_rep == 0.0 && s.loss_logit == 0.0));
    assert!(log.iter().all(|s| s.total == s.loss_mlm + s.loss_nsp));
}

#[test]
fn nan_parameter_aborts_with_its_name() {
    let c = corpus();
    let mut m = model(&c, Variant::BipftA);
    let id = m.params.find("embeddings.position").expect("position table");
    m.params.value_mut(id).data_mut()[3] = f64::NAN;
    match pretrain_loop(&mut m, &c, None, &short(2, 1), None) {
        Err(Error::NonFinite { tensor }) => assert!(!tensor.is_empty()),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn infinite_learning_rate_is_caught() {
    let c = corpus();
    let mut m = model(&c, Variant::Fp);
    let cfg = TrainConfig {
        peak_lr: f64::INFINITY,
        warmup_frac: 0.0,
        ..short(2, 1)
    };
    assert!(matches!(
        pretrain_loop(&mut m, &c, None, &cfg, None),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn invalid_train_config_is_rejected() {
    let c = corpus();
    let mut m = model(&c, Variant::Fp);
    let cfg = TrainConfig {
        batch_size: 0,
        ..short(2, 1)
    };
    assert!(matches!(
        pretrain_loop(&mut m, &c, None, &cfg, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn mismatched_teacher_is_rejected() {
    let c = corpus();
    let mut student = model(&c, Variant::BipftA);
    let mut cfg = ModelConfig::tiny(c.tokenizer.len()).with_variant(Variant::Fp);
    cfg.layers = 3;
    let teacher = build_model(&cfg).unwrap();
    assert!(pretrain_loop(&mut student, &c, Some(&teacher), &short(1, 1), None).is_err());
}

fn labeled(c: &Corpus, seed: u64, n: usize) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let ex = encode_labeled(&c.tokenizer, &toy_classification(seed, n), 64);
    let (a, b) = ex.split_at(n * 4 / 5);
    (a.to_vec(), b.to_vec())
}

#[test]
fn out_of_range_label_is_a_data_error() {
    let c = corpus();
    let mut m = model(&c, Variant::BipftA);
    let (mut train, test) = labeled(&c, 1, 20);
    train[0].label = 5;
    let r = finetune(&mut m, &train, &test, &FinetuneConfig::default());
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn accuracy_needs_a_classifier() {
    let c = corpus();
    let m = model(&c, Variant::BipftA);
    let (_, test) = labeled(&c, 1, 20);
    assert!(matches!(accuracy(&m, &test), Err(Error::Contract(_))));
}

#[test]
fn zero_epochs_is_near_chance() {
    let c = corpus();
    let mut m = model(&c, Variant::BipftA);
    let (train, test) = labeled(&c, 2, 500);
    let cfg = FinetuneConfig {
        epochs: 0,
        ..FinetuneConfig::default()
    };
    let report = finetune(&mut m, &train, &test, &cfg).unwrap();
    assert!(report.epochs.is_empty());
    assert!((report.test_acc - 0.5).abs() <= 0.10, "accuracy {}", report.test_acc);
}

#[test]
fn separable_task_is_learned_within_five_epochs() {
    let c = corpus();
    let mut m = model(&c, Variant::BipftA);
    let (train, test) = labeled(&c, 3, 2000);
    let report = finetune(&mut m, &train, &test, &FinetuneConfig::default()).unwrap();
    assert!(report.test_acc >= 0.95, "{report:?}");
    assert_eq!(accuracy(&m, &test).unwrap(), report.test_acc);
}

#[test]
fn frozen_body_only_moves_the_classifier() {
    let c = corpus();
    let mut m = model(&c, Variant::BipftA);
    let (train, test) = labeled(&c, 4, 100);
    let cfg = FinetuneConfig {
        epochs: 1,
        freeze_body: true,
        ..FinetuneConfig::default()
    };
    let mut reference = m.clone();
    finetune(&mut m, &train, &test, &cfg).unwrap();
    // same calibration and head initialization, zero epochs
    finetune(&mut reference, &train, &test, &FinetuneConfig { epochs: 0, ..cfg }).unwrap();
    let mut head_moved = false;
    for ((_, a), (_, b)) in m.params.iter().zip(reference.params.iter()) {
        if a.name.starts_with("heads.cls.") {
            head_moved |= a.value != b.value;
        } else {
            assert_eq!(a.value, b.value, "{} moved", a.name);
        }
    }
    assert!(head_moved);
}
