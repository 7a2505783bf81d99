//! `captioner`: synthesize data, train, caption, evaluate and gradient-check
//! from the command line.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use captioner::data::{self, SynthConfig};
use captioner::decode::caption_image;
use captioner::eval::evaluate;
use captioner::model::checkpoint::{load_checkpoint, vocab_sidecar_path};
use captioner::model::{ModelConfig, Precision};
use captioner::text::{corpus_stats, normalize_and_tokenize, Vocabulary};
use captioner::train::{backward, grad_check_against, train, GradCheckCase, TrainConfig, TrainPaths};
use clap::{Args, Parser, Subcommand};

use crate::config::ConfigFile;

const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "captioner", version, about = "Image captioning with stacked bidirectional LSTMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded toy dataset (embeddings.cemb and captions.tsv).
    Synth(SynthArgs),
    /// Split a caption file into train and test files.
    Split(SplitArgs),
    /// Print vocabulary and caption-length statistics.
    Stats(StatsArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Generate captions for images.
    Caption(CaptionArgs),
    /// Score generated captions against references with BLEU.
    Eval(EvalArgs),
    /// Compare backpropagated gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    images: usize,
    /// Image embedding width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Number of distinct synthetic words.
    #[arg(long, default_value_t = 50)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Defaults to min(4, max-len).
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    test_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    captions: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    d_embed: Option<usize>,
    /// LSTM hidden size per direction.
    #[arg(long)]
    hidden: Option<usize>,
    /// Maximum caption length.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    bidirectional: Option<bool>,
    /// 32 or 64.
    #[arg(long)]
    precision: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Per-epoch JSON lines.
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    /// Log every this many epochs; 0 silences progress.
    #[arg(long)]
    log_every: Option<usize>,
    /// Maximum global gradient norm per batch.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Words seen fewer times map to `<unk>`.
    #[arg(long)]
    min_count: Option<usize>,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the checkpoint path with `.vocab` appended.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    embeddings: PathBuf,
    /// Comma-separated image ids; defaults to every image in the embeddings file.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    /// Write `id<TAB>caption` lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_img: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
    /// Finite-difference step.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

/// A problem with how the command was invoked rather than with its inputs.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| Usage(format!("{e:#}")).into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg = SynthConfig::new(a.images, a.dim, a.vocab, a.max_len, a.seed);
    cfg.min_caption_len = a.min_len;
    let dataset = data::synth_dataset(&cfg)?;
    let (emb, cap) = dataset.write(&a.out_dir)?;
    println!("wrote {} and {}", emb.display(), cap.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_split(a: SplitArgs) -> Result<ExitCode> {
    let raw = data::load_captions(&a.captions)?;
    let (train, test) = data::split_train_test(&raw, a.test_count, a.seed)?;
    data::save_captions(&train, &a.train_out)?;
    data::save_captions(&test, &a.test_out)?;
    println!("{} train, {} test", train.len(), test.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(a: StatsArgs) -> Result<ExitCode> {
    let raw = data::load_captions(&a.captions)?;
    let corpus: Vec<_> = raw.iter().map(|r| normalize_and_tokenize(&r.caption)).collect();
    let stats = corpus_stats(&corpus);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!("captions\t{}", raw.len());
    println!("unique_tokens\t{}", stats.unique_tokens);
    println!("total_tokens\t{}", stats.total_tokens);
    for (len, count) in &stats.length_histogram {
        println!("length {len}\t{count}");
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_precision(bits: u32) -> Result<Precision> {
    Precision::from_bits(bits).ok_or_else(|| anyhow!("precision must be 32 or 64, got {bits}"))
}

/// Applies model flags and file keys on top of `base`.
fn resolve_model(flags: ModelFlags, file: &mut ConfigFile, base: ModelConfig) -> Result<ModelConfig> {
    let precision = match file.pick(flags.precision, "precision")? {
        Some(bits) => parse_precision(bits)?,
        None => base.precision,
    };
    Ok(ModelConfig {
        d_embed: file.pick_or(flags.d_embed, "d_embed", base.d_embed)?,
        hidden: file.pick_or(flags.hidden, "hidden", base.hidden)?,
        n: file.pick_or(flags.n, "n", base.n)?,
        bidirectional: file.pick_or(flags.bidirectional, "bidirectional", base.bidirectional)?,
        precision,
        ..base
    })
}

struct TrainRun {
    captions: PathBuf,
    embeddings: PathBuf,
    checkpoint_out: PathBuf,
    report_out: Option<PathBuf>,
    model: ModelConfig,
    train: TrainConfig,
    min_count: usize,
}

fn resolve_train(a: TrainArgs) -> Result<TrainRun> {
    let mut file = ConfigFile::load(a.config.as_deref())?;
    let required = |file: &mut ConfigFile, flag: Option<PathBuf>, key: &str| -> Result<PathBuf> {
        file.pick(flag, key)?
            .ok_or_else(|| anyhow!("--{} is required (flag or config key `{key}`)", key.replace('_', "-")))
    };
    let captions = required(&mut file, a.captions, "captions")?;
    let embeddings = required(&mut file, a.embeddings, "embeddings")?;
    let checkpoint_out = required(&mut file, a.checkpoint_out, "checkpoint_out")?;
    let report_out = file.pick(a.report_out, "report_out")?;
    let model = resolve_model(a.model, &mut file, ModelConfig::default())?;
    let d = TrainConfig::default();
    let train = TrainConfig {
        learning_rate: file.pick_or(a.learning_rate, "learning_rate", d.learning_rate)?,
        epochs: file.pick_or(a.epochs, "epochs", d.epochs)?,
        batch_size: file.pick_or(a.batch_size, "batch_size", d.batch_size)?,
        shuffle_seed: file.pick_or(a.shuffle_seed, "shuffle_seed", d.shuffle_seed)?,
        init_seed: file.pick_or(a.init_seed, "init_seed", d.init_seed)?,
        log_every: file.pick_or(a.log_every, "log_every", d.log_every)?,
        clip_norm: file.pick(a.clip_norm, "clip_norm")?,
    };
    let min_count = file.pick_or(a.min_count, "min_count", 1)?;
    file.finish()?;
    train.validate()?;
    if min_count == 0 {
        bail!("min_count must be positive");
    }
    Ok(TrainRun {
        captions,
        embeddings,
        checkpoint_out,
        report_out,
        model,
        train,
        min_count,
    })
}

fn check_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input file {} does not exist", path.display());
    }
    Ok(())
}

fn check_output(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        bail!("output directory {} does not exist", parent.display());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let run = usage(resolve_train(a))?;
    check_input(&run.captions)?;
    check_input(&run.embeddings)?;
    check_output(&run.checkpoint_out)?;
    if let Some(p) = &run.report_out {
        check_output(p)?;
    }
    let paths = TrainPaths {
        captions: &run.captions,
        embeddings: &run.embeddings,
        checkpoint_out: &run.checkpoint_out,
    };
    let (epochs, log_every) = (run.train.epochs, run.train.log_every);
    let report = train(paths, run.model, &run.train, run.min_count, |r| {
        if log_every > 0 && (r.epoch % log_every == 0 || r.epoch == epochs) {
            eprintln!(
                "epoch {}/{epochs}  mean_loss {:.6}  samples {}  {:.2}s",
                r.epoch, r.mean_loss, r.samples, r.seconds
            );
        }
    })?;
    if let Some(p) = &run.report_out {
        report.save_jsonl(p)?;
    }
    println!(
        "trained on {} pairs ({} samples per epoch), vocabulary {}; checkpoint {}",
        report.pairs,
        report.samples_per_epoch,
        report.vocab.len(),
        run.checkpoint_out.display()
    );
    if let Some(loss) = report.final_loss() {
        println!("final mean_loss {loss:.6}");
    }
    Ok(ExitCode::SUCCESS)
}

fn load_vocab(checkpoint: &Path, vocab: Option<PathBuf>) -> Result<Vocabulary> {
    Ok(Vocabulary::load(vocab.unwrap_or_else(|| vocab_sidecar_path(checkpoint)))?)
}

fn cmd_caption(a: CaptionArgs) -> Result<ExitCode> {
    let params = load_checkpoint(&a.checkpoint)?;
    let vocab = load_vocab(&a.checkpoint, a.vocab)?;
    let table = data::load_embeddings(&a.embeddings)?;
    let ids: Vec<String> = if a.ids.is_empty() {
        table.iter().map(|e| e.image_id.clone()).collect()
    } else {
        a.ids
    };
    let mut lines = String::new();
    for id in &ids {
        let caption = caption_image(&params, &vocab, table.vector(id)?)?;
        lines.push_str(&format!("{id}\t{}\n", caption.text()));
    }
    match &a.out {
        Some(path) => std::fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(lines.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let report = evaluate(
        &a.checkpoint,
        a.vocab.as_deref(),
        &a.captions,
        &a.embeddings,
        a.out.as_deref(),
    )?;
    println!("images\t{}", report.per_image.len());
    println!("corpus_bleu\t{:.6}", report.corpus_bleu);
    println!("mean_sentence_bleu_x100\t{:.4}", report.mean_sentence_bleu_x100);
    Ok(ExitCode::SUCCESS)
}

/// The small model used when no sizes are given.
fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_img: 5,
        d_embed: 6,
        hidden: 4,
        layers: 2,
        bidirectional: true,
        vocab_size: 12,
        n: 4,
        precision: Precision::F64,
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let (model, seed, eps) = usage((|| {
        let mut file = ConfigFile::load(a.config.as_deref())?;
        let base = tiny_model();
        let base = ModelConfig {
            d_img: file.pick_or(a.d_img, "d_img", base.d_img)?,
            vocab_size: file.pick_or(a.vocab_size, "vocab_size", base.vocab_size)?,
            ..base
        };
        let model = resolve_model(a.model, &mut file, base)?;
        let seed = file.pick_or(a.seed, "seed", 0)?;
        let eps = file.pick_or(a.eps, "eps", 1e-5)?;
        file.finish()?;
        if model.precision != Precision::F64 {
            bail!("gradient checking needs --precision 64; 32-bit finite differences are too coarse to meet a 1e-4 tolerance");
        }
        model.validate()?;
        Ok((model, seed, eps))
    })())?;

    let case = GradCheckCase::random(model, seed)?;
    let (_, mut analytic) = backward(&case.params, case.input(), case.target)?;
    if a.corrupt_gradient {
        let (row, col) = (case.target, 0);
        analytic.w_out[[row, col]] += 0.05;
    }
    let report = grad_check_against(&case.params, case.input(), case.target, &analytic, eps, seed)?;
    println!("components checked\t{}", report.checked);
    println!("max relative error\t{:.3e}", report.max_relative_error);
    println!(
        "worst\t{}[{}] analytic {:.6e} numerical {:.6e}",
        report.worst.0, report.worst.1, report.analytic_at_worst, report.numerical_at_worst
    );
    if report.max_relative_error < GRAD_CHECK_TOLERANCE {
        println!("PASS (< {GRAD_CHECK_TOLERANCE:e})");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL (>= {GRAD_CHECK_TOLERANCE:e})");
        Ok(ExitCode::from(1))
    }
}
