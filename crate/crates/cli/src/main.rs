//! Command-line pipeline: synthetic data generation, vocabulary
//! construction, teacher/student training with knowledge distillation,
//! evaluation with significance testing, candidate indexing, and the
//! latency benchmark.
//!
//! Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric divergence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use distilrank::data::{
    self, choose_max_len, generate_synthetic, input_length, load_dataset, sha256_file,
    write_manifest, DataError, Example, Manifest, SyntheticSpec, Vocab,
};
use distilrank::eval::{self, EvalError};
use distilrank::heads::{HeadConfig, HeadKind};
use distilrank::model::{Checkpoint, Model, ModelConfig, ModelError};
use distilrank::train::{
    self, cache_teacher_logits, DistillationRecord, NegativesMode, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(name = "distilrank", version, about = "Desk-scale response retrieval with knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TeacherHead {
    EnhancedCross,
    PlainCross,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    Submult,
    Attention,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StudentArch {
    /// Transformer bi-encoder ([CLS] dot product).
    Bi,
    /// BiLSTM bi-encoder ([CLS]⊕max⊕mean dot product).
    Bilstm,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    /// Training-config JSON file (defaults applied first, flags last).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Clone)]
struct ModelShape {
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic train/valid/test JSONL splits from a spec file.
    GenData {
        /// SyntheticSpec JSON file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a frequency vocabulary from the train split of a data dir.
    BuildVocab {
        #[arg(long)]
        data: PathBuf,
        /// Total id budget, including the 5 reserved ids.
        #[arg(long)]
        max_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a cross-encoder teacher.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "enhanced-cross")]
        head: TeacherHead,
        /// Drop a component of the enhanced head.
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        #[command(flatten)]
        shape: ModelShape,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Run a frozen teacher over a dataset and persist its logits.
    CacheLogits {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a bi-encoder student, optionally with teacher logits.
    Distill {
        #[arg(long, value_enum)]
        student: StudentArch,
        /// Cross-entropy weight; 1-alpha weighs the distillation term.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Teacher-logit records; omit for a no-distillation baseline.
        #[arg(long)]
        teacher_logits: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shape: ModelShape,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Evaluate a checkpoint; optionally compare against a second one.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-encode responses into a candidate index (bi-encoder only).
    Index {
        #[arg(long)]
        model: PathBuf,
        /// JSONL file of {"id": ..., "text": ...} responses.
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latency benchmark: mean/median ms per test sample.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated candidate counts, e.g. 10,100.
        #[arg(long, default_value = "10,100")]
        candidates: String,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 30)]
        samples: usize,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output is not an error
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Divergence { .. } => 3,
                TrainError::Data { .. } | TrainError::Io { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Io { .. }
                | EvalError::BadIndexFile { .. }
                | EvalError::ChecksumMismatch { .. } => 2,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return match e {
                ModelError::Io { .. } | ModelError::Checkpoint { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, out, seed } => gen_data(&spec, &out, seed),
        Cmd::BuildVocab {
            data,
            max_size,
            out,
        } => build_vocab(&data, max_size, &out),
        Cmd::TrainTeacher {
            data,
            vocab,
            out,
            head,
            ablate,
            shape,
            train,
        } => train_teacher(&data, &vocab, &out, head, ablate, &shape, &train),
        Cmd::CacheLogits { teacher, data, out } => cache_logits(&teacher, &data, &out),
        Cmd::Distill {
            student,
            alpha,
            teacher_logits,
            data,
            vocab,
            out,
            shape,
            train,
        } => distill(
            student,
            alpha,
            teacher_logits.as_deref(),
            &data,
            &vocab,
            &out,
            &shape,
            &train,
        ),
        Cmd::Evaluate {
            model,
            data,
            compare,
            out,
        } => evaluate(&model, &data, compare.as_deref(), out.as_deref()),
        Cmd::Index {
            model,
            responses,
            out,
        } => index(&model, &responses, &out),
        Cmd::Bench {
            model,
            data,
            candidates,
            warmup,
            samples,
        } => bench(&model, &data, &candidates, warmup, samples),
    }
}

fn manifest_for(
    command: &str,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<Manifest> {
    let hash_all = |paths: &[&Path]| -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect()
    };
    Ok(Manifest {
        tool: "distilrank".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        argv: std::env::args().collect(),
        seed,
        inputs: hash_all(inputs)?,
        outputs: hash_all(outputs)?,
    })
}

fn manifest_path(primary_output: &Path) -> PathBuf {
    let mut name = primary_output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    primary_output.with_file_name(name)
}

fn gen_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading spec {}", spec_path.display()))?;
    let mut spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| DataError::InvalidSpec {
            msg: format!("{}: {e}", spec_path.display()),
        })?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate_synthetic(&spec)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let splits = [
        ("train.jsonl", &data.train),
        ("valid.jsonl", &data.valid),
        ("test.jsonl", &data.test),
    ];
    let mut outputs = Vec::new();
    for (name, examples) in splits {
        let path = out.join(name);
        data::save_dataset(&path, examples)?;
        eprintln!("wrote {} examples to {}", examples.len(), path.display());
        outputs.push(path);
    }
    let output_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let manifest = manifest_for("gen-data", Some(spec.seed), &[spec_path], &output_refs)?;
    write_manifest(out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn build_vocab(data_dir: &Path, max_size: usize, out: &Path) -> Result<()> {
    let train_path = data_dir.join("train.jsonl");
    let train = load_dataset(&train_path)?;
    eprintln!("loaded {} train examples", train.len());
    let vocab = Vocab::build(
        train.iter().flat_map(|ex| {
            std::iter::once(ex.context.as_str()).chain(ex.candidates.iter().map(String::as_str))
        }),
        max_size,
    );
    vocab.save(out)?;
    eprintln!("wrote vocabulary of {} ids to {}", vocab.vocab_size(), out.display());
    let manifest = manifest_for("build-vocab", None, &[&train_path], &[out])?;
    write_manifest(manifest_path(out), &manifest)?;
    Ok(())
}

/// 80th-percentile budgets so at most 20% of each side gets truncated.
fn pick_max_lens(train: &[Example]) -> (usize, usize) {
    let ctx_lengths: Vec<usize> = train.iter().map(|e| input_length(&e.context)).collect();
    let resp_lengths: Vec<usize> = train
        .iter()
        .flat_map(|e| e.candidates.iter().map(|c| input_length(c)))
        .collect();
    (
        choose_max_len(&ctx_lengths, 0.8).max(2),
        choose_max_len(&resp_lengths, 0.8).max(2),
    )
}

fn load_train_config(base: TrainConfig, overrides: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match &overrides.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading train config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing train config {}", path.display()))?
        }
        None => base,
    };
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(e) = overrides.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = overrides.lr {
        cfg.lr = lr;
    }
    if let Some(b) = overrides.batch_size {
        cfg.batch_size = b;
    }
    Ok(cfg)
}

fn load_splits(data_dir: &Path) -> Result<(Vec<Example>, Vec<Example>)> {
    let train = load_dataset(data_dir.join("train.jsonl"))?;
    let valid = load_dataset(data_dir.join("valid.jsonl"))?;
    eprintln!("loaded {} train / {} valid examples", train.len(), valid.len());
    Ok((train, valid))
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    mut model: Model,
    vocab: &Vocab,
    train_data: &[Example],
    valid_data: &[Example],
    cfg: &TrainConfig,
    records: Option<&[DistillationRecord]>,
    out: &Path,
    inputs: &[&Path],
) -> Result<()> {
    let outcome = train::train(&mut model, vocab, train_data, valid_data, cfg, records, |s| {
        eprintln!(
            "epoch {:>3}: loss {:.4}  val R@1 {:.4}  val MRR {:.4}",
            s.epoch, s.train_loss, s.val_r1, s.val_mrr
        );
    })?;
    eprintln!(
        "best epoch {} with val R@1 {:.4}",
        outcome.best_epoch, outcome.best_val.r1
    );
    let ckpt = Checkpoint::from_model(&model, vocab, Some(cfg.clone()), Some(outcome.best_val));
    ckpt.save(out)?;
    eprintln!("wrote checkpoint {}", out.display());
    let manifest = manifest_for("train", Some(cfg.seed), inputs, &[out])?;
    write_manifest(manifest_path(out), &manifest)?;
    Ok(())
}

fn train_teacher(
    data_dir: &Path,
    vocab_path: &Path,
    out: &Path,
    head: TeacherHead,
    ablate: Option<Ablation>,
    shape: &ModelShape,
    overrides: &TrainOverrides,
) -> Result<()> {
    let (train_data, valid_data) = load_splits(data_dir)?;
    let vocab = Vocab::load(vocab_path)?;
    let (max_ctx, max_resp) = pick_max_lens(&train_data);
    eprintln!("input budgets: context {max_ctx}, response {max_resp}");

    let mut head_cfg = match head {
        TeacherHead::EnhancedCross => HeadConfig::enhanced_cross(),
        TeacherHead::PlainCross => HeadConfig::plain_cross(),
    };
    match ablate {
        Some(Ablation::Submult) if head == TeacherHead::EnhancedCross => {
            head_cfg.use_submult = false
        }
        Some(Ablation::Attention) if head == TeacherHead::EnhancedCross => {
            head_cfg.use_cross_attention = false
        }
        Some(_) => bail!("--ablate applies only to the enhanced cross head"),
        None => {}
    }

    let mut model_cfg =
        ModelConfig::desk_transformer(vocab.vocab_size(), head_cfg, max_ctx, max_resp);
    model_cfg.encoder.d_model = shape.d_model;
    model_cfg.encoder.n_layers = shape.n_layers;
    model_cfg.encoder.n_heads = shape.n_heads;
    model_cfg.encoder.d_ff = shape.d_ff;

    let mut cfg = load_train_config(TrainConfig::for_transformer(), overrides)?;
    cfg.negatives = match head {
        TeacherHead::EnhancedCross => NegativesMode::InBatch,
        TeacherHead::PlainCross => NegativesMode::Explicit,
    };

    let model = Model::new(model_cfg, cfg.seed)?;
    run_training(
        model,
        &vocab,
        &train_data,
        &valid_data,
        &cfg,
        None,
        out,
        &[&data_dir.join("train.jsonl"), vocab_path],
    )
}

fn cache_logits(teacher_path: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(teacher_path)?;
    let (model, vocab) = ckpt.instantiate()?;
    let data = load_dataset(data_path)?;
    eprintln!("caching teacher logits for {} examples", data.len());
    let records = cache_teacher_logits(&model, &vocab, &data)?;
    train::save_records(out, &records)?;
    eprintln!("wrote {} records to {}", records.len(), out.display());
    let manifest = manifest_for("cache-logits", None, &[teacher_path, data_path], &[out])?;
    write_manifest(manifest_path(out), &manifest)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn distill(
    student: StudentArch,
    alpha: f64,
    records_path: Option<&Path>,
    data_dir: &Path,
    vocab_path: &Path,
    out: &Path,
    shape: &ModelShape,
    overrides: &TrainOverrides,
) -> Result<()> {
    let (train_data, valid_data) = load_splits(data_dir)?;
    let vocab = Vocab::load(vocab_path)?;
    let (max_ctx, max_resp) = pick_max_lens(&train_data);

    let (model_cfg, base) = match student {
        StudentArch::Bi => {
            let mut cfg = ModelConfig::desk_transformer(
                vocab.vocab_size(),
                HeadConfig::bi(),
                max_ctx,
                max_resp,
            );
            cfg.encoder.d_model = shape.d_model;
            cfg.encoder.n_layers = shape.n_layers;
            cfg.encoder.n_heads = shape.n_heads;
            cfg.encoder.d_ff = shape.d_ff;
            (cfg, TrainConfig::for_transformer())
        }
        StudentArch::Bilstm => {
            let mut cfg = ModelConfig::desk_bilstm(vocab.vocab_size(), max_ctx, max_resp);
            cfg.encoder.d_model = shape.d_model;
            (cfg, TrainConfig::for_bilstm())
        }
    };
    let mut cfg = load_train_config(base, overrides)?;
    cfg.alpha = alpha;
    cfg.negatives = NegativesMode::InBatch;

    let records = match records_path {
        Some(p) => Some(train::load_records(p)?),
        None => None,
    };
    if let Some(r) = &records {
        eprintln!("distilling from {} teacher records (alpha {alpha})", r.len());
    }

    let model = Model::new(model_cfg, cfg.seed)?;
    let train_path = data_dir.join("train.jsonl");
    let mut inputs: Vec<&Path> = vec![&train_path, vocab_path];
    if let Some(p) = records_path {
        inputs.push(p);
    }
    run_training(
        model,
        &vocab,
        &train_data,
        &valid_data,
        &cfg,
        records.as_deref(),
        out,
        &inputs,
    )
}

fn evaluate(
    model_path: &Path,
    data_path: &Path,
    compare: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(model_path)?;
    let (model, vocab) = ckpt.instantiate()?;
    let data = load_dataset(data_path)?;
    let results = eval::evaluate_model(&model, &vocab, &data)?;
    let r1 = eval::recall_at_1(&results)?;
    let mrr = eval::mrr(&results)?;

    let mut report = serde_json::Map::new();
    report.insert("r1_x100".into(), (100.0 * r1).into());
    report.insert("mrr_x100".into(), (100.0 * mrr).into());
    report.insert("n".into(), results.len().into());
    if let Some(stored) = ckpt.val_metrics {
        report.insert("stored_val_r1_x100".into(), (100.0 * stored.r1).into());
        report.insert("stored_val_mrr_x100".into(), (100.0 * stored.mrr).into());
    }

    if let Some(compare_path) = compare {
        let other_ckpt = Checkpoint::load(compare_path)?;
        let (other, other_vocab) = other_ckpt.instantiate()?;
        let other_results = eval::evaluate_model(&other, &other_vocab, &data)?;
        for (a, b) in results.iter().zip(&other_results) {
            if a.id != b.id {
                bail!("comparison is not paired: {:?} vs {:?}", a.id, b.id);
            }
        }
        let p = eval::paired_ttest(
            &eval::reciprocal_ranks(&results),
            &eval::reciprocal_ranks(&other_results),
        )?;
        report.insert(
            "compare_r1_x100".into(),
            (100.0 * eval::recall_at_1(&other_results)?).into(),
        );
        report.insert(
            "compare_mrr_x100".into(),
            (100.0 * eval::mrr(&other_results)?).into(),
        );
        report.insert("p_value_reciprocal_rank".into(), p.into());
    }

    let body = serde_json::to_string_pretty(&serde_json::Value::Object(report))?;
    println!("{body}");
    if let Some(out) = out {
        std::fs::write(out, format!("{body}\n"))
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct ResponseLine {
    id: String,
    text: String,
}

fn index(model_path: &Path, responses_path: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(model_path)?;
    let (model, vocab) = ckpt.instantiate()?;
    let text = std::fs::read_to_string(responses_path)
        .with_context(|| format!("reading {}", responses_path.display()))?;
    let mut responses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ResponseLine = serde_json::from_str(line).map_err(|e| DataError::Parse {
            path: responses_path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        responses.push((r.id, r.text));
    }
    eprintln!("encoding {} responses", responses.len());
    let idx = eval::build_candidate_index(&model, &vocab, &responses)?;
    idx.save(out)?;
    eprintln!(
        "wrote index of {} vectors (d = {}) to {}",
        idx.len(),
        idx.d,
        out.display()
    );
    let manifest = manifest_for("index", None, &[model_path, responses_path], &[out])?;
    write_manifest(manifest_path(out), &manifest)?;
    Ok(())
}

fn bench(
    model_path: &Path,
    data_path: &Path,
    candidates: &str,
    warmup: usize,
    samples: usize,
) -> Result<()> {
    let counts: Vec<usize> = candidates
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing --candidates {candidates:?}"))?;
    let ckpt = Checkpoint::load(model_path)?;
    let (model, vocab) = ckpt.instantiate()?;
    let data = load_dataset(data_path)?;
    let report = eval::benchmark_latency(&model, &vocab, &data, &counts, warmup, samples)?;

    let entries: Vec<serde_json::Value> = report
        .entries
        .iter()
        .map(|e| {
            serde_json::json!({
                "candidates": e.candidates,
                "mean_ms": e.mean_ms,
                "median_ms": e.median_ms,
                "samples": e.samples,
            })
        })
        .collect();
    let body = serde_json::to_string_pretty(&serde_json::json!({
        "head": match report.head {
            HeadKind::Bi => "bi",
            HeadKind::PlainCross => "plain_cross",
            HeadKind::EnhancedCross => "enhanced_cross",
        },
        "entries": entries,
    }))?;
    println!("{body}");
    Ok(())
}
