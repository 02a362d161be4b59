use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use naus::decode::{CollapseMode, DecodeConfig, DecoderKind, DEFAULT_BEAM};
use naus::fluency::NGramLM;
use naus::model::{load_checkpoint, save_checkpoint, train, ModelConfig, OptimConfig, Positional};
use naus::oracle::{run_oracle_check, worked_example, OracleSizes};
use naus::pipeline::{cmd_pipeline, encode_pairs, summarize_lines, timing_tsv, train_lm_stage, PipelineConfig, PipelineError};
use naus::rougeval::{corpus_eval, BudgetUnit, Protocol, RougeReport};
use naus::search::{batch_search, read_pairs, Scorer, SearchConfig};
use naus::similarity::EmbeddingTable;
use naus::textkit::{read_corpus, Vocab};
use naus::toydata::{templated_corpus, vectors_text, word_vectors};

#[derive(Parser)]
#[command(name = "naus", version, about = "Search-and-learn unsupervised sentence summarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and train the n-gram fluency model.
    TrainLm(TrainLmArgs),
    /// Hill-climbing extraction over a corpus, writing pseudo-summaries.
    Search(SearchArgs),
    /// Train the encoder on pseudo-summaries with CTC loss.
    TrainNaus(TrainNausArgs),
    /// Summarize one sentence per line with a trained model.
    Summarize(SummarizeArgs),
    /// Score predictions against references with ROUGE.
    Evaluate(EvaluateArgs),
    /// Run every stage from a key=value config file.
    Pipeline(PipelineArgs),
    /// Check the CTC and decoding programs against brute-force enumeration.
    OracleCheck(OracleArgs),
    /// Write a synthetic templated corpus and matching word vectors.
    ToyData(ToyArgs),
}

#[derive(Args)]
struct TrainLmArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "vocab.txt")]
    vocab: PathBuf,
    #[arg(long, default_value = "lm.bin")]
    lm: PathBuf,
    #[arg(long, default_value_t = 4)]
    order: usize,
    /// Add-k smoothing constant.
    #[arg(long, default_value_t = 0.1)]
    k: f64,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long, default_value = "pseudo.tsv")]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    length: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainNausArgs {
    /// Pseudo-summary TSV from `search`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    model_dim: usize,
    /// Per-head attention width; defaults to model_dim / heads.
    #[arg(long)]
    attn_dim: Option<usize>,
    #[arg(long, default_value_t = 128)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value = "sinusoidal")]
    positional: Positional,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// One sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    length: usize,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    #[arg(long, default_value = "length-control")]
    decoder: DecoderKind,
    #[arg(long, default_value = "merge")]
    mode: CollapseMode,
    /// Write per-sample microseconds (index, forward, decode, total) to this TSV.
    #[arg(long)]
    timing: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// f1 or truncated-recall.
    #[arg(long, default_value = "f1")]
    protocol: String,
    #[arg(long, default_value_t = 75)]
    char_budget: usize,
    /// Measure the truncation budget in bytes instead of characters.
    #[arg(long)]
    bytes: bool,
    /// Timing sidecar written by `summarize --timing`.
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Earlier report to compute score and speed deltas against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 6)]
    max_slots: usize,
    #[arg(long, default_value_t = 3)]
    max_words: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 2000)]
    sentences: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "corpus.txt")]
    corpus: PathBuf,
    #[arg(long, default_value = "vectors.txt")]
    vectors: PathBuf,
}

/// Invalid argument combination; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().lock().write_all(text.as_bytes())?),
    }
}

fn train_lm_cmd(a: TrainLmArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let (vocab, lm) = train_lm_stage(&corpus, a.order, a.k).map_err(|e| anyhow::anyhow!(e))?;
    vocab.save(&a.vocab)?;
    lm.save(&a.lm)?;
    log::info!("vocabulary of {} entries, order-{} model on {} sentences", vocab.len(), a.order, corpus.len());
    Ok(())
}

fn search_cmd(a: SearchArgs) -> Result<()> {
    if a.length == 0 || a.steps == 0 {
        return Err(usage("--length and --steps must be at least 1".into()));
    }
    let corpus = read_corpus(&a.corpus)?;
    let vocab = Vocab::load(&a.vocab)?;
    let lm = NGramLM::load(&a.lm)?;
    let table = EmbeddingTable::load(&a.vectors)?;
    let cfg = SearchConfig { target_length: a.length, gamma: a.gamma, steps: a.steps, restarts: a.restarts, rng_seed: a.seed };
    let scorer = Scorer { vocab: &vocab, lm: &lm, table: &table, gamma: a.gamma };
    let n = batch_search(&corpus, &cfg, &scorer, &a.out)?;
    log::info!("wrote {n} pseudo-summaries to {}", a.out.display());
    Ok(())
}

fn train_naus_cmd(a: TrainNausArgs) -> Result<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let pairs = read_pairs(&a.pairs)?;
    let data = encode_pairs(&pairs, &vocab);
    let config = ModelConfig {
        layers: a.layers,
        heads: a.heads,
        model_dim: a.model_dim,
        attn_dim: a.attn_dim.unwrap_or(a.model_dim / a.heads.max(1)),
        ffn_dim: a.ffn_dim,
        vocab_size: vocab.num_words(),
        max_len: a.max_len,
        positional: a.positional,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let opt = OptimConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        peak_lr: a.lr,
        warmup_steps: a.warmup,
        seed: a.seed,
        ..OptimConfig::default()
    };
    let mut trained = train(&data, &config, &opt)?;
    trained.params.round_to_f32();
    save_checkpoint(&trained.params, &a.out)?;
    for (i, l) in trained.report.epoch_losses.iter().enumerate() {
        println!("{}\t{l:.6}", i + 1);
    }
    Ok(())
}

fn summarize_cmd(a: SummarizeArgs) -> Result<()> {
    let params = load_checkpoint(&a.model)?;
    if a.length > params.config.max_len {
        return Err(usage(format!("--length {} exceeds the model's max_len {}", a.length, params.config.max_len)));
    }
    if a.length == 0 || a.beam == 0 {
        return Err(usage("--length and --beam must be at least 1".into()));
    }
    let vocab = Vocab::load(&a.vocab)?;
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    let config = DecodeConfig { decoder: a.decoder, length: a.length, beam: a.beam, mode: a.mode };
    let out = summarize_lines(&params, &vocab, &lines, &config, a.timing.is_some()).map_err(|e| anyhow::anyhow!(e))?;
    let body: String = out.lines.iter().map(|l| format!("{l}\n")).collect();
    write_output(a.output.as_deref(), &body)?;
    if let (Some(path), Some(t)) = (&a.timing, &out.timings) {
        fs::write(path, timing_tsv(t))?;
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let protocol = match a.protocol.parse::<Protocol>().map_err(usage)? {
        Protocol::F1 => Protocol::F1,
        Protocol::TruncatedRecall { .. } => Protocol::TruncatedRecall {
            char_budget: a.char_budget,
            unit: if a.bytes { BudgetUnit::Bytes } else { BudgetUnit::Chars },
        },
    };
    let baseline = match &a.baseline {
        Some(p) => Some(RougeReport::from_json(&fs::read_to_string(p)?)?),
        None => None,
    };
    let report = corpus_eval(&a.pred, &a.reference, protocol, a.timing.as_deref(), baseline.as_ref())?;
    write_output(a.out.as_deref(), &(report.to_json() + "\n"))
}

fn pipeline_cmd(a: PipelineArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let config = PipelineConfig::from_kv(&text).map_err(|e| usage(e.to_string()))?;
    let out = cmd_pipeline(&config).map_err(|e| match e {
        PipelineError::Config(m) => usage(m),
        other => other.into(),
    })?;
    println!("{}", out.report.to_json());
    Ok(())
}

fn oracle_cmd(a: OracleArgs) -> Result<()> {
    if a.max_slots == 0 || a.max_words == 0 {
        return Err(usage("--max-slots and --max-words must be at least 1".into()));
    }
    let sizes = OracleSizes { trials: a.trials, max_slots: a.max_slots, max_words: a.max_words, seed: a.seed };
    if ((sizes.max_words + 1) as f64).powi(sizes.max_slots as i32) > naus::ctc::ENUMERATION_LIMIT {
        return Err(usage("sizes exceed the brute-force enumeration limit".into()));
    }
    print!("{}", worked_example()?);
    let report = run_oracle_check(&sizes);
    print!("{report}");
    if !report.ok() {
        anyhow::bail!("oracle mismatch");
    }
    Ok(())
}

fn toy_cmd(a: ToyArgs) -> Result<()> {
    fs::write(&a.corpus, templated_corpus(a.sentences, a.seed).join("\n") + "\n")?;
    fs::write(&a.vectors, vectors_text(&word_vectors(a.dim, a.seed)))?;
    Ok(())
}

fn configure_threads() {
    let Ok(v) = std::env::var("NAUS_THREADS") else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not set thread count: {e}");
            }
        }
        _ => log::warn!("ignoring NAUS_THREADS={v:?}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::TrainLm(a) => train_lm_cmd(a),
        Command::Search(a) => search_cmd(a),
        Command::TrainNaus(a) => train_naus_cmd(a),
        Command::Summarize(a) => summarize_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
        Command::OracleCheck(a) => oracle_cmd(a),
        Command::ToyData(a) => toy_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
