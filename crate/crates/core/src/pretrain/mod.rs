//! Data pipeline, objectives, pretraining loop and finetuning.

mod corpus;
mod data;
mod distill;
mod finetune;
mod train;

pub use corpus::{
    split_documents, topic_name, toy_classification, toy_corpus_text, toy_sentence, Corpus, Tokenizer, CLS, MASK,
    NUM_SPECIALS, NUM_TOPICS, PAD, SEP, SPECIALS, UNK,
};
pub use data::{frame_pair, make_nsp_pairs, mask_tokens, Example, MaskStats, NspPair, TokenBatch, IGNORE, MASK_PROB};
pub use distill::{distill_losses, kl_divergence, kl_op, mse, mse_op, total_loss, DistillTargets, LossFlags};
pub use finetune::{
    accuracy, encode_labeled, finetune, predict, EpochMetrics, FinetuneConfig, FinetuneReport, LabeledExample,
};
pub use train::{
    evaluate, pretrain_loop, thread_pool, training_batch, EvalMetrics, StepMetrics, TrainConfig, METRICS_HEADER,
    THREADS_ENV,
};
