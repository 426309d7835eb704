//! Command-line front end: `pretrain`, `finetune`, `verify`, `bench`,
//! `inspect` and `gen-corpus`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bitkernel::{binary_gemm, equivalent_flops, pack_signs};
use crate::error::{Error, Result};
use crate::model::{build_model, load_checkpoint, load_checkpoint_as, save_checkpoint, Model, ModelConfig, Variant};
use crate::numerics::ops::matmul_bt;
use crate::numerics::Matrix;
use crate::pretrain::{
    encode_labeled, finetune, pretrain_loop, toy_classification, toy_corpus_text, Corpus, FinetuneConfig,
    LabeledExample, Tokenizer, TrainConfig,
};
use crate::rng::{substream, Stream};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "bitformer",
    version,
    about = "1-bit transformer encoder: pretraining, finetuning and kernel checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain on MLM + NSP (plus distillation with --teacher).
    Pretrain(PretrainArgs),
    /// Train a classifier head on a labeled TSV (`label<TAB>text`).
    Finetune(FinetuneArgs),
    /// Run the built-in oracle and invariant suites.
    Verify(VerifyArgs),
    /// Print FLOP/size accounting and kernel throughput.
    Bench(BenchArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
    /// Write a synthetic corpus and labeled train/test sets.
    GenCorpus(GenCorpusArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Preset name (tiny, base) or a JSON model config file.
    #[arg(long, default_value = "tiny")]
    pub config: String,
    /// baseline, bipft-a, bipft-b or fp.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub rank: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub warmup_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Full-precision teacher checkpoint for distillation.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 30522)]
    pub max_vocab: usize,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint; omit with --scratch.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Start from a freshly initialized model instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub scratch: bool,
    /// Vocabulary source for --scratch runs.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub freeze_body: bool,
    #[arg(long, default_value = "finetune")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run a single suite.
    #[arg(long)]
    pub only: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Print `metric=value` lines instead of the table.
    #[arg(long)]
    pub kv: bool,
    /// Skip the kernel timing.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 200)]
    pub docs: usize,
    #[arg(long, default_value_t = 400)]
    pub examples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

/// Record of one invocation, written before any model state is touched.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: serde_json::Value,
    pub model_config: Option<ModelConfig>,
    pub seed: u64,
    pub build_id: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

pub fn build_id() -> String {
    format!("bitformer-v{}", env!("CARGO_PKG_VERSION"))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    fn new(command: &str, args: &impl Serialize, seed: u64) -> Self {
        Self {
            command: command.into(),
            args: serde_json::to_value(args).unwrap_or(serde_json::Value::Null),
            model_config: None,
            seed,
            build_id: build_id(),
            started_unix: now(),
            finished_unix: None,
            outputs: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::MissingTensors(_)
        | Error::Checksum { .. }
        | Error::Version { .. }
        | Error::Truncated(_)
        | Error::BadMagic
        | Error::Dimension { .. } => EXIT_SCHEMA,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Pretrain(a) => cmd_pretrain(&a, out),
        Command::Finetune(a) => cmd_finetune(&a, out),
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
        Command::GenCorpus(a) => cmd_gen_corpus(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("stdout", e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Resolves `--config/--variant/--rank` for a vocabulary size.
pub fn resolve_config(m: &ModelArgs, vocab: usize, seed: u64) -> Result<ModelConfig> {
    let mut cfg = match m.config.as_str() {
        "tiny" | "base" => ModelConfig::preset(&m.config, vocab)?,
        path => {
            let text = read_text(Path::new(path))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{path}: {e}")]))?
        }
    };
    cfg.vocab = vocab;
    cfg.seed = seed;
    if let Some(v) = m.variant {
        cfg.variant = v;
    }
    if let Some(r) = m.rank {
        cfg.rank = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(vec![format!(
            "{what} `{}` does not exist",
            path.display()
        )]))
    }
}

fn cmd_pretrain(a: &PretrainArgs, out: &mut dyn Write) -> Result<i32> {
    require_file(&a.corpus, "corpus")?;
    if let Some(t) = &a.teacher {
        require_file(t, "teacher checkpoint")?;
    }
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("pretrain", a, a.seed);
    manifest.write(&a.out)?;

    let text = read_text(&a.corpus)?;
    let teacher = a.teacher.as_ref().map(load_checkpoint).transpose()?;
    let tokenizer = match &teacher {
        Some(t) => Tokenizer::from_tokens(t.vocab.clone())?,
        None => Tokenizer::build(text.lines(), a.max_vocab)?,
    };
    let corpus = Corpus::with_tokenizer(&text, tokenizer)?;
    let cfg = resolve_config(&a.model, corpus.tokenizer.len(), a.seed)?;
    manifest.model_config = Some(cfg.clone());
    manifest.write(&a.out)?;

    let mut model = build_model(&cfg)?;
    model.vocab = corpus.tokenizer.tokens().to_vec();
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        peak_lr: a.lr,
        warmup_frac: a.warmup_frac,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let log_path = a.out.join("metrics.tsv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let metrics = pretrain_loop(&mut model, &corpus, teacher.as_ref(), &tc, Some(&mut log))?;
    let ckpt = a.out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    if let (Some(first), Some(last)) = (metrics.first(), metrics.last()) {
        emit(
            out,
            &format!(
                "steps {}  mlm {:.4} -> {:.4}  nsp {:.4} -> {:.4}\ncheckpoint {}\n",
                metrics.len(),
                first.loss_mlm,
                last.loss_mlm,
                first.loss_nsp,
                last.loss_nsp,
                ckpt.display()
            ),
        )?;
    }
    manifest.outputs = vec![ckpt, log_path];
    manifest.finished_unix = Some(now());
    manifest.write(&a.out)?;
    Ok(EXIT_OK)
}

/// Reads `label<TAB>text` lines; blank lines are skipped.
pub fn read_labeled(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (label, body) = l
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}:{}: expected `label<TAB>text`", path.display(), i + 1)))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("{}:{}: bad label `{label}`", path.display(), i + 1)))?;
            Ok((body.to_string(), label))
        })
        .collect()
}

fn cmd_finetune(a: &FinetuneArgs, out: &mut dyn Write) -> Result<i32> {
    require_file(&a.train, "training set")?;
    require_file(&a.test, "test set")?;
    match (&a.checkpoint, a.scratch) {
        (Some(p), _) => require_file(p, "checkpoint")?,
        (None, true) => {}
        (None, false) => return Err(Error::Config(vec!["pass --checkpoint or --scratch".into()])),
    }
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("finetune", a, a.seed);
    manifest.write(&a.out)?;

    let train_raw = read_labeled(&a.train)?;
    let test_raw = read_labeled(&a.test)?;
    let mut model: Model = match &a.checkpoint {
        Some(p) => {
            let stored = load_checkpoint(p)?;
            if a.model.variant.is_some_and(|v| v != stored.config.variant) || a.model.rank.is_some() {
                let mut cfg = stored.config.clone();
                if let Some(v) = a.model.variant {
                    cfg.variant = v;
                }
                if let Some(r) = a.model.rank {
                    cfg.rank = r;
                }
                load_checkpoint_as(p, &cfg)?
            } else {
                stored
            }
        }
        None => {
            let tokenizer = match &a.corpus {
                Some(c) => Tokenizer::build(read_text(c)?.lines(), 30522)?,
                None => Tokenizer::build(train_raw.iter().map(|(t, _)| t.as_str()), 30522)?,
            };
            let cfg = resolve_config(&a.model, tokenizer.len(), a.seed)?;
            let mut m = build_model(&cfg)?;
            m.vocab = tokenizer.tokens().to_vec();
            m
        }
    };
    manifest.model_config = Some(model.config.clone());
    manifest.write(&a.out)?;

    let tokenizer = Tokenizer::from_tokens(model.vocab.clone())?;
    let enc = |d: &[(String, usize)]| -> Vec<LabeledExample> { encode_labeled(&tokenizer, d, model.config.max_seq) };
    let (train, test) = (enc(&train_raw), enc(&test_raw));
    let classes = train
        .iter()
        .chain(&test)
        .map(|e| e.label)
        .max()
        .map_or(2, |m| (m + 1).max(2));
    let cfg = FinetuneConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        classes,
        seed: a.seed,
        freeze_body: a.freeze_body,
        ..FinetuneConfig::default()
    };
    let report = finetune(&mut model, &train, &test, &cfg)?;
    for e in &report.epochs {
        emit(
            out,
            &format!(
                "epoch {}  loss {:.4}  train_acc {:.4}  test_acc {:.4}\n",
                e.epoch, e.loss, e.train_acc, e.test_acc
            ),
        )?;
    }
    emit(out, &format!("accuracy {:.4}\n", report.test_acc))?;
    let ckpt = a.out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    manifest.outputs = vec![ckpt];
    manifest.finished_unix = Some(now());
    manifest.write(&a.out)?;
    Ok(EXIT_OK)
}

fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let results = verify::run_all(a.seed, a.only.as_deref())?;
    emit(out, &verify::table(&results))?;
    Ok(if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_VERIFY
    })
}

/// Packed-kernel versus float-GEMM throughput on an `n × k · (m × k)ᵀ`
/// product; returns `(binary_s, float_s, ratio)`.
pub fn kernel_throughput(n: usize, k: usize, m: usize, reps: usize) -> Result<(f64, f64, f64)> {
    let mut rng = substream(0, Stream::Verify);
    let a = Matrix::random_normal(n, k, 1.0, &mut rng);
    let b = Matrix::random_normal(m, k, 1.0, &mut rng);
    let (pa, pb) = (pack_signs(&a), pack_signs(&b));
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(binary_gemm(&pa, &pb, 1.0)?);
    }
    let bin = t.elapsed().as_secs_f64() / reps as f64;
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(matmul_bt(&a, &b)?);
    }
    let fp = t.elapsed().as_secs_f64() / reps as f64;
    Ok((bin, fp, fp / bin.max(f64::MIN_POSITIVE)))
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<i32> {
    let vocab = if a.model.config == "tiny" { 1000 } else { 30522 };
    let cfg = resolve_config(&a.model, vocab, 0)?;
    let report = equivalent_flops(&cfg);
    emit(out, &if a.kv { report.key_values() } else { report.text() })?;
    if !a.no_timing {
        let (n, k) = (cfg.max_seq, cfg.hidden);
        let (bin, fp, ratio) = kernel_throughput(n, k, k, 5)?;
        let line = if a.kv {
            format!("kernel_binary_s={bin:.6e}\nkernel_float_s={fp:.6e}\nkernel_speedup={ratio:.3}\n")
        } else {
            format!("kernel {n}x{k}x{k}: packed {bin:.3e} s, f64 {fp:.3e} s, speedup {ratio:.2}x\n")
        };
        emit(out, &line)?;
    }
    Ok(EXIT_OK)
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<i32> {
    require_file(&a.checkpoint, "checkpoint")?;
    let m = load_checkpoint(&a.checkpoint)?;
    let cfg = serde_json::to_string_pretty(&m.config).map_err(|e| Error::Data(e.to_string()))?;
    emit(
        out,
        &format!(
            "{cfg}\nvocabulary {}\ntensors {}\nscalars {}\nbackbone params {}\ncalibrated {}\nclassifier {}\n",
            m.vocab.len(),
            m.params.len(),
            m.params.num_scalars(),
            m.backbone_params(),
            m.calibrated,
            m.num_classes().map_or("none".to_string(), |c| format!("{c} classes")),
        ),
    )?;
    Ok(EXIT_OK)
}

fn cmd_gen_corpus(a: &GenCorpusArgs, out: &mut dyn Write) -> Result<i32> {
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("gen-corpus", a, a.seed);
    manifest.write(&a.out)?;
    let corpus = a.out.join("corpus.txt");
    fs::write(&corpus, toy_corpus_text(a.seed, a.docs)).map_err(|e| Error::io(&corpus, e))?;
    let data = toy_classification(a.seed, a.examples);
    let split = a.examples * 4 / 5;
    let tsv = |rows: &[(String, usize)]| rows.iter().map(|(t, l)| format!("{l}\t{t}\n")).collect::<String>();
    let (train, test) = (a.out.join("train.tsv"), a.out.join("test.tsv"));
    fs::write(&train, tsv(&data[..split])).map_err(|e| Error::io(&train, e))?;
    fs::write(&test, tsv(&data[split..])).map_err(|e| Error::io(&test, e))?;
    emit(
        out,
        &format!("wrote {}, {}, {}\n", corpus.display(), train.display(), test.display()),
    )?;
    manifest.outputs = vec![corpus, train, test];
    manifest.finished_unix = Some(now());
    manifest.write(&a.out)?;
    Ok(EXIT_OK)
}
