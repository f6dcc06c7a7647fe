//! Subcommand implementations.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;

use postsel_core::checkpoint::load_checkpoint;
use postsel_core::corpus::{
    build_vocab, generate_synthetic, ingest, load_jsonl, read_raw_jsonl, save_jsonl, split_turns,
    tokenize, CorpusLimits, DialogueTurn, RawTurn, SyntheticSpec,
};
use postsel_core::decoder::{decode_generate, DecodeStrategy, DecoderIds};
use postsel_core::encoder::{encode_sequence, EncoderIds};
use postsel_core::error::{Error, Result};
use postsel_core::eval::{evaluate, write_generations, EvalOptions};
use postsel_core::gradcheck::{gradient_check, toy_config, toy_turn};
use postsel_core::knowledge::{select_for_mode, SelectionMode};
use postsel_core::metrics::score_corpus;
use postsel_core::model::{DecoderMode, ModelConfig, PostSelModel};
use postsel_core::objective::{knowledge_forward, total_loss, Phase};
use postsel_core::params::{GradStore, ParamStore};
use postsel_core::rng::derive_rng;
use postsel_core::tensor::Graph;
use postsel_core::training::{train, TrainConfig};

use crate::config_file::ConfigFile;

// ── gen-synthetic ───────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct GenSyntheticArgs {
    /// Output path; `<stem>.train/valid/test.jsonl` are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of turns before the 80/10/10 split.
    #[arg(long, default_value_t = 1000)]
    pub turns: usize,
    /// Knowledge collection size per turn.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Content vocabulary size.
    #[arg(long, default_value_t = 120)]
    pub vocab: usize,
    /// Fraction of response tokens copied from the gold knowledge.
    #[arg(long, default_value_t = 0.8)]
    pub copy_rate: f64,
    #[arg(long, default_value_t = 4)]
    pub knowledge_len_min: usize,
    #[arg(long, default_value_t = 8)]
    pub knowledge_len_max: usize,
    #[arg(long, default_value_t = 4)]
    pub utterance_len_min: usize,
    #[arg(long, default_value_t = 8)]
    pub utterance_len_max: usize,
    #[arg(long, default_value_t = 5)]
    pub response_len_min: usize,
    #[arg(long, default_value_t = 10)]
    pub response_len_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// `<stem>.train.jsonl` and friends for an `--out` like `synth.jsonl`.
fn split_paths(out: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = out.to_string_lossy();
    let stem = stem.strip_suffix(".jsonl").unwrap_or(&stem).to_string();
    (
        PathBuf::from(format!("{stem}.train.jsonl")),
        PathBuf::from(format!("{stem}.valid.jsonl")),
        PathBuf::from(format!("{stem}.test.jsonl")),
    )
}

pub fn gen_synthetic(args: GenSyntheticArgs) -> Result<u8> {
    let spec = SyntheticSpec {
        vocab_size: args.vocab,
        knowledge_count: args.n,
        knowledge_len: (args.knowledge_len_min, args.knowledge_len_max),
        utterance_len: (args.utterance_len_min, args.utterance_len_max),
        response_len: (args.response_len_min, args.response_len_max),
        copy_rate: args.copy_rate,
        turns: args.turns,
        seed: args.seed,
    };
    let turns = generate_synthetic(&spec)?;
    let (train_set, valid_set, test_set) = split_turns(&turns);
    let (train_path, valid_path, test_path) = split_paths(&args.out);
    if let Some(parent) = train_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    save_jsonl(&train_path, &train_set)?;
    save_jsonl(&valid_path, &valid_set)?;
    save_jsonl(&test_path, &test_set)?;
    println!("{}\t{} turns", train_path.display(), train_set.len());
    println!("{}\t{} turns", valid_path.display(), valid_set.len());
    println!("{}\t{} turns", test_path.display(), test_set.len());
    Ok(0)
}

// ── train ───────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset: either a single `.jsonl` (split 90/10 into train/valid)
    /// or the `--out` stem of gen-synthetic (uses `<stem>.train.jsonl`
    /// and `<stem>.valid.jsonl`).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for config copy, checkpoints and the loss log.
    #[arg(long, default_value = "run")]
    pub run_dir: PathBuf,
    /// Key-value config file; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<DecoderModeArg>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Give the knowledge encoder its own embedding table.
    #[arg(long)]
    pub no_share_embeddings: bool,
    /// Let gradients flow through the posterior inside the KL term.
    #[arg(long)]
    pub kl_train_posterior: bool,
    /// Maximum vocabulary size (reserved ids included).
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_utterance_len: Option<usize>,
    #[arg(long)]
    pub max_response_len: Option<usize>,
    #[arg(long)]
    pub max_knowledge_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub bow_pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_epsilon: Option<f64>,
    /// Global-norm gradient clip.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Disable gradient clipping.
    #[arg(long)]
    pub no_clip: bool,
    /// Select the best epoch by validation NLL instead of total loss.
    #[arg(long)]
    pub select_by_nll: bool,
    /// Pretrained embedding file (`token v1 v2 ...` per line) applied
    /// over the random initialization.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum DecoderModeArg {
    Concat,
    Fusion,
    NoKnowledge,
}

impl From<DecoderModeArg> for DecoderMode {
    fn from(m: DecoderModeArg) -> Self {
        match m {
            DecoderModeArg::Concat => DecoderMode::Concat,
            DecoderModeArg::Fusion => DecoderMode::Fusion,
            DecoderModeArg::NoKnowledge => DecoderMode::NoKnowledge,
        }
    }
}

/// Load train/valid raw splits for a `--data` argument.
fn resolve_dataset(data: &Path) -> Result<(Vec<RawTurn>, Vec<RawTurn>)> {
    if data.is_file() {
        let raw = read_raw_jsonl(data)?;
        if raw.len() < 2 {
            return Err(Error::Config(format!(
                "{}: need at least 2 records to split into train/valid",
                data.display()
            )));
        }
        let train_n = ((raw.len() * 9) / 10).clamp(1, raw.len() - 1);
        let (train_raw, valid_raw) = raw.split_at(train_n);
        Ok((train_raw.to_vec(), valid_raw.to_vec()))
    } else {
        let (train_path, valid_path, _) = split_paths(data);
        if !train_path.is_file() {
            return Err(Error::Config(format!(
                "dataset not found: neither {} nor {} exists",
                data.display(),
                train_path.display()
            )));
        }
        Ok((read_raw_jsonl(&train_path)?, read_raw_jsonl(&valid_path)?))
    }
}

struct ResolvedTrain {
    model_config: ModelConfig,
    train_config: TrainConfig,
    limits: CorpusLimits,
    max_vocab: usize,
    seed: u64,
}

fn resolve_train_settings(args: &TrainArgs, file: &ConfigFile) -> Result<ResolvedTrain> {
    let mode: DecoderMode = match args.mode {
        Some(m) => m.into(),
        None => file
            .resolve(None::<String>, "mode", "fusion".to_string())?
            .parse()?,
    };
    let defaults = TrainConfig::default();
    let grad_clip = if file.resolve_switch(args.no_clip, "no-clip")? {
        None
    } else {
        Some(file.resolve(args.grad_clip, "grad-clip", 5.0)?)
    };
    let train_config = TrainConfig {
        epochs: file.resolve(args.epochs, "epochs", defaults.epochs)?,
        bow_pretrain_epochs: file.resolve(
            args.bow_pretrain_epochs,
            "bow-pretrain-epochs",
            defaults.bow_pretrain_epochs,
        )?,
        batch_size: file.resolve(args.batch_size, "batch-size", defaults.batch_size)?,
        learning_rate: file.resolve(args.learning_rate, "learning-rate", defaults.learning_rate)?,
        beta1: file.resolve(args.beta1, "beta1", defaults.beta1)?,
        beta2: file.resolve(args.beta2, "beta2", defaults.beta2)?,
        epsilon: file.resolve(args.adam_epsilon, "adam-epsilon", defaults.epsilon)?,
        grad_clip,
        select_by_nll: file.resolve_switch(args.select_by_nll, "select-by-nll")?,
    };
    let model_config = ModelConfig {
        vocab_size: 0, // patched once the vocabulary is built
        embed_dim: file.resolve(args.embed_dim, "embed-dim", 32)?,
        hidden_dim: file.resolve(args.hidden_dim, "hidden-dim", 32)?,
        num_layers: file.resolve(args.layers, "layers", 1)?,
        mode,
        temperature: file.resolve(args.temperature, "temperature", 1.0)?,
        share_embeddings: !file.resolve_switch(args.no_share_embeddings, "no-share-embeddings")?,
        kl_train_posterior: file.resolve_switch(args.kl_train_posterior, "kl-train-posterior")?,
    };
    let limits = CorpusLimits {
        max_utterance_len: file.resolve(args.max_utterance_len, "max-utterance-len", 50)?,
        max_response_len: file.resolve(args.max_response_len, "max-response-len", 50)?,
        max_knowledge_len: file.resolve(args.max_knowledge_len, "max-knowledge-len", 50)?,
    };
    Ok(ResolvedTrain {
        model_config,
        train_config,
        limits,
        max_vocab: file.resolve(args.vocab_size, "vocab-size", 20_000)?,
        seed: file.resolve(args.seed, "seed", 0)?,
    })
}

fn write_run_config(
    path: &Path,
    args: &TrainArgs,
    resolved: &ResolvedTrain,
    vocab_len: usize,
) -> Result<()> {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    let m = &resolved.model_config;
    let t = &resolved.train_config;
    kv("data", args.data.display().to_string());
    kv("mode", m.mode.as_str().to_string());
    kv("embed-dim", m.embed_dim.to_string());
    kv("hidden-dim", m.hidden_dim.to_string());
    kv("layers", m.num_layers.to_string());
    kv("temperature", m.temperature.to_string());
    kv("no-share-embeddings", (!m.share_embeddings).to_string());
    kv("kl-train-posterior", m.kl_train_posterior.to_string());
    kv("vocab-size", resolved.max_vocab.to_string());
    kv("actual-vocab", vocab_len.to_string());
    kv(
        "max-utterance-len",
        resolved.limits.max_utterance_len.to_string(),
    );
    kv(
        "max-response-len",
        resolved.limits.max_response_len.to_string(),
    );
    kv(
        "max-knowledge-len",
        resolved.limits.max_knowledge_len.to_string(),
    );
    kv("epochs", t.epochs.to_string());
    kv("bow-pretrain-epochs", t.bow_pretrain_epochs.to_string());
    kv("batch-size", t.batch_size.to_string());
    kv("learning-rate", t.learning_rate.to_string());
    kv("beta1", t.beta1.to_string());
    kv("beta2", t.beta2.to_string());
    kv("adam-epsilon", t.epsilon.to_string());
    match t.grad_clip {
        Some(c) => kv("grad-clip", c.to_string()),
        None => kv("no-clip", "true".to_string()),
    }
    kv("select-by-nll", t.select_by_nll.to_string());
    kv("seed", resolved.seed.to_string());
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn cmd_train(args: TrainArgs) -> Result<u8> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let mut resolved = resolve_train_settings(&args, &file)?;
    let (train_raw, valid_raw) = resolve_dataset(&args.data)?;
    let vocab = build_vocab(&train_raw, resolved.max_vocab);
    let (train_set, train_report) = ingest(&train_raw, &vocab, &resolved.limits);
    let (valid_set, valid_report) = ingest(&valid_raw, &vocab, &resolved.limits);
    eprintln!(
        "train: {} loaded, {} dropped, {} truncated; valid: {} loaded, {} dropped",
        train_report.loaded,
        train_report.dropped,
        train_report.truncated_sequences,
        valid_report.loaded,
        valid_report.dropped
    );
    resolved.model_config.vocab_size = vocab.len();
    resolved.model_config.validate()?;
    resolved.train_config.validate()?;

    std::fs::create_dir_all(&args.run_dir)
        .map_err(|e| Error::io(args.run_dir.display().to_string(), e))?;
    write_run_config(
        &args.run_dir.join("config.txt"),
        &args,
        &resolved,
        vocab.len(),
    )?;

    let mut model = PostSelModel::new(resolved.model_config.clone(), resolved.seed)?;
    if let Some(path) = &args.embeddings {
        let loaded = model.load_embedding_file(&vocab, path)?;
        eprintln!(
            "loaded {loaded} pretrained embedding rows from {}",
            path.display()
        );
    }
    let outcome = train(
        &mut model,
        &vocab,
        &train_set,
        &valid_set,
        &resolved.train_config,
        resolved.seed,
        &args.run_dir,
        |r| {
            eprintln!(
                "epoch {:3} [{}] train total {:.4} | val total {:.4} nll {:.4}",
                r.epoch,
                r.phase.as_str(),
                r.train_total,
                r.val_total,
                r.val_nll
            );
        },
    )?;
    println!(
        "best epoch {} -> {}",
        outcome.best_epoch,
        outcome.best_checkpoint.display()
    );
    Ok(0)
}

// ── eval ────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation split (a single .jsonl file).
    #[arg(long)]
    pub data: PathBuf,
    /// Refuse the checkpoint unless it was trained in this mode.
    #[arg(long)]
    pub mode: Option<DecoderModeArg>,
    /// Output directory for report.txt and generations.tsv
    /// (default: the checkpoint's directory).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value = "greedy")]
    pub strategy: String,
    #[arg(long, default_value_t = 4)]
    pub beam_width: usize,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    /// Sample the knowledge index from the prior instead of argmax.
    #[arg(long)]
    pub infer_sample: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_strategy(name: &str, beam_width: usize) -> Result<DecodeStrategy> {
    match name {
        "greedy" => Ok(DecodeStrategy::Greedy),
        "beam" => Ok(DecodeStrategy::Beam(beam_width)),
        other => Err(Error::Config(format!(
            "unknown strategy '{other}' (expected greedy or beam)"
        ))),
    }
}

pub fn cmd_eval(args: EvalArgs) -> Result<u8> {
    let (model, vocab, _) = load_checkpoint(&args.checkpoint)?;
    if let Some(mode) = args.mode {
        let mode: DecoderMode = mode.into();
        if mode != model.config.mode {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained in {} mode, requested {}",
                model.config.mode.as_str(),
                mode.as_str()
            )));
        }
    }
    let (turns, report) = load_jsonl(&args.data, &vocab, &CorpusLimits::default())?;
    eprintln!(
        "eval data: {} loaded, {} dropped",
        report.loaded, report.dropped
    );
    let options = EvalOptions {
        strategy: parse_strategy(&args.strategy, args.beam_width)?,
        max_len: args.max_len,
        sample_at_infer: args.infer_sample,
        seed: args.seed,
    };
    let output = evaluate(&model, &vocab, &turns, &options)?;
    let out_dir = args.out_dir.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let report_path = out_dir.join("report.txt");
    let mut text = output.report.to_kv();
    if let Some(acc) = output.prior_accuracy {
        text.push_str(&format!("prior_accuracy = {acc}\n"));
    }
    if let Some(acc) = output.posterior_accuracy {
        text.push_str(&format!("posterior_accuracy = {acc}\n"));
    }
    std::fs::write(&report_path, &text)
        .map_err(|e| Error::io(report_path.display().to_string(), e))?;
    write_generations(&out_dir.join("generations.tsv"), &output.generations)?;
    print!("{text}");
    Ok(0)
}

// ── metrics ─────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Generated responses, one per line.
    #[arg(long)]
    pub hypotheses: PathBuf,
    /// References, one per line, aligned with the hypotheses.
    #[arg(long)]
    pub references: PathBuf,
    /// Knowledge collections, one line per example, sentences separated
    /// by `||`. Omit to skip the knowledge metrics.
    #[arg(long)]
    pub knowledge: Option<PathBuf>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

pub fn cmd_metrics(args: MetricsArgs) -> Result<u8> {
    let hyp_lines = read_lines(&args.hypotheses)?;
    let ref_lines = read_lines(&args.references)?;
    if hyp_lines.len() != ref_lines.len() {
        return Err(Error::Misaligned(format!(
            "{} hypotheses vs {} references",
            hyp_lines.len(),
            ref_lines.len()
        )));
    }
    let hyps: Vec<Vec<String>> = hyp_lines.iter().map(|l| tokenize(l)).collect();
    let refs: Vec<Vec<String>> = ref_lines.iter().map(|l| tokenize(l)).collect();
    let knowledge: Option<Vec<Vec<Vec<String>>>> = match &args.knowledge {
        None => None,
        Some(path) => {
            let lines = read_lines(path)?;
            if lines.len() != hyps.len() {
                return Err(Error::Misaligned(format!(
                    "{} hypotheses vs {} knowledge lines",
                    hyps.len(),
                    lines.len()
                )));
            }
            Some(
                lines
                    .iter()
                    .map(|l| {
                        l.split("||")
                            .map(tokenize)
                            .filter(|t| !t.is_empty())
                            .collect()
                    })
                    .collect(),
            )
        }
    };
    if knowledge.is_none() {
        eprintln!("warning: no knowledge file given; knowledge metrics omitted");
    }
    let report = score_corpus(&hyps, &refs, knowledge.as_deref())?;
    if knowledge.is_some() && report.knowledge_f1.is_none() {
        eprintln!("warning: every knowledge collection was empty; knowledge metrics omitted");
    }
    if report.tokens == 0 {
        eprintln!("warning: all hypotheses are empty");
    }
    print!("{}", report.to_kv());
    Ok(0)
}

// ── gradcheck ───────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Decoder mode to check: concat, fusion or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 50)]
    pub coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: corrupt the analytic gradient of this parameter.
    #[arg(long, hide = true)]
    pub inject_grad_error: Option<String>,
}

fn gradcheck_one(
    mode: DecoderMode,
    args: &GradcheckArgs,
) -> Result<postsel_core::gradcheck::GradCheckReport> {
    let config = toy_config(mode);
    let model = PostSelModel::new(config.clone(), args.seed)?;
    let turn = toy_turn();
    let seed = args.seed;
    let inject = args.inject_grad_error.clone();
    let eval = move |params: &ParamStore, want_grads: bool| -> Result<(f64, Option<GradStore>)> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g)?;
        let mut rng = derive_rng(seed, "gradcheck-noise");
        let out = total_loss(&mut g, &bound, &config, &turn, Phase::Full, &mut rng)?;
        if !want_grads {
            return Ok((out.bundle.total, None));
        }
        g.backward(out.total_id)?;
        let mut grads = GradStore::new();
        bound.accumulate_grads(&g, &mut grads);
        if let Some(name) = &inject {
            let buf = grads.get_mut(name).ok_or_else(|| {
                Error::Config(format!("cannot inject error: no parameter named {name}"))
            })?;
            for v in buf.iter_mut() {
                *v += 0.05;
            }
        }
        Ok((out.bundle.total, Some(grads)))
    };
    gradient_check(
        &model.params,
        eval,
        args.epsilon,
        args.tolerance,
        args.coords,
        args.seed,
    )
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8> {
    let modes: Vec<DecoderMode> = match args.mode.as_str() {
        "both" => vec![DecoderMode::Concat, DecoderMode::Fusion],
        other => vec![other.parse()?],
    };
    let started = Instant::now();
    let mut all_pass = true;
    for mode in modes {
        let report = gradcheck_one(mode, &args)?;
        println!("== decoder mode: {} ==", mode.as_str());
        println!("{report}");
        all_pass &= report.all_pass();
    }
    println!("elapsed: {:.1}s", started.elapsed().as_secs_f64());
    Ok(if all_pass { 0 } else { 1 })
}

// ── chat ────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Knowledge sentences separated by `||`.
    #[arg(long)]
    pub knowledge: Option<String>,
    /// Knowledge sentences, one per line.
    #[arg(long)]
    pub knowledge_file: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn chat_knowledge(args: &ChatArgs) -> Result<Vec<String>> {
    let mut sentences = Vec::new();
    if let Some(inline) = &args.knowledge {
        sentences.extend(
            inline
                .split("||")
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty()),
        );
    }
    if let Some(path) = &args.knowledge_file {
        sentences.extend(
            read_lines(path)?
                .into_iter()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty()),
        );
    }
    Ok(sentences)
}

/// Selected knowledge index and prior probabilities, when applicable.
type ChatSelection = Option<(usize, Vec<f64>)>;

fn chat_reply(
    model: &PostSelModel,
    knowledge_ids: &[Vec<u32>],
    utterance: &[u32],
    max_len: usize,
    seed: u64,
    turn_index: usize,
) -> Result<(Vec<u32>, ChatSelection)> {
    let config = &model.config;
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g)?;
    let dec_ids = DecoderIds::bind(&bound, config);
    if config.mode.uses_knowledge() && !knowledge_ids.is_empty() {
        let turn = DialogueTurn {
            utterance: utterance.to_vec(),
            response: vec![],
            knowledge: knowledge_ids.to_vec(),
            gold_knowledge_idx: None,
        };
        let fwd = knowledge_forward(&mut g, &bound, config, &turn, false)?;
        let mut rng = derive_rng(seed, &format!("chat/{turn_index}"));
        let selected = select_for_mode(
            &mut g,
            SelectionMode::Infer,
            &fwd.prior,
            None,
            &fwd.knowledge_vectors,
            config.temperature,
            &mut rng,
            false,
        )?;
        let probs = g.values(fwd.prior.probs).to_vec();
        let reply = decode_generate(
            &mut g,
            &dec_ids,
            &fwd.encoder,
            Some(selected.vector),
            DecodeStrategy::Greedy,
            max_len,
        )?;
        Ok((reply, Some((selected.hard_index, probs))))
    } else {
        let utt_ids = EncoderIds::bind(&bound, "enc_utt", "embedding", config.num_layers);
        let encoder = encode_sequence(&mut g, &utt_ids, config, utterance)?;
        let knowledge_vector = if config.mode.uses_knowledge() {
            // no knowledge supplied: run knowledge-free with a zero vector
            Some(g.leaf(
                vec![0.0; 2 * config.hidden_dim],
                vec![2 * config.hidden_dim],
            )?)
        } else {
            None
        };
        let reply = decode_generate(
            &mut g,
            &dec_ids,
            &encoder,
            knowledge_vector,
            DecodeStrategy::Greedy,
            max_len,
        )?;
        Ok((reply, None))
    }
}

pub fn cmd_chat(args: ChatArgs) -> Result<u8> {
    let (model, vocab, _) = load_checkpoint(&args.checkpoint)?;
    let sentences = chat_knowledge(&args)?;
    let knowledge_ids: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| vocab.encode(&tokenize(s)))
        .filter(|ids| !ids.is_empty())
        .collect();
    if knowledge_ids.is_empty() && model.config.mode.uses_knowledge() {
        eprintln!("notice: no knowledge supplied; running without knowledge");
    }
    for (i, s) in sentences.iter().enumerate() {
        eprintln!("knowledge[{i}]: {s}");
    }
    eprintln!("type an utterance, :quit to exit");

    let stdin = std::io::stdin();
    let mut turn_index = 0usize;
    loop {
        eprint!("> ");
        std::io::stderr().flush().ok();
        let mut line = String::new();
        if stdin
            .lock()
            .read_line(&mut line)
            .map_err(|e| Error::io("stdin", e))?
            == 0
        {
            break; // EOF
        }
        let line = line.trim();
        if line == ":quit" {
            break;
        }
        if line.is_empty() {
            continue;
        }
        let utterance = vocab.encode(&tokenize(line));
        if utterance.is_empty() {
            eprintln!("(empty after tokenization)");
            continue;
        }
        let (reply, selection) = chat_reply(
            &model,
            &knowledge_ids,
            &utterance,
            args.max_len,
            args.seed,
            turn_index,
        )?;
        println!("reply: {}", vocab.decode_joined(&reply));
        if let Some((index, probs)) = selection {
            let rendered: Vec<String> = probs.iter().map(|p| format!("{p:.4}")).collect();
            println!("selected knowledge: {index}");
            println!("prior: {}", rendered.join(" "));
        }
        turn_index += 1;
    }
    Ok(0)
}
