//! End-to-end orchestration: language model, search, student training,
//! summarization and evaluation, with a manifest of artifact hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decode::{decode, CollapseMode, DecodeConfig, DecoderKind};
use crate::fluency::{NGramLM, Smoothing};
use crate::model::{forward, save_checkpoint, train, ModelConfig, ModelParams, OptimConfig, Positional, TrainReport};
use crate::rougeval::{corpus_eval, Protocol, RougeReport};
use crate::search::{batch_search, read_pairs, PseudoPair, Scorer, SearchConfig};
use crate::similarity::EmbeddingTable;
use crate::textkit::{read_corpus, tokenize, Vocab};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("{what} not found: {}", path.display())]
    MissingPath { what: &'static str, path: PathBuf },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxError,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn stage<T, E: Into<BoxError>>(name: &'static str, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| PipelineError::Stage { stage: name, source: e.into() })
}

/// Builds the vocabulary and trains the fluency model on a corpus.
pub fn train_lm_stage<S: AsRef<str>>(corpus: &[S], order: usize, k: f64) -> std::result::Result<(Vocab, NGramLM), BoxError> {
    let vocab = Vocab::build(corpus.iter().map(AsRef::as_ref), 1)?;
    let ids: Vec<Vec<usize>> = corpus
        .iter()
        .filter_map(|l| tokenize(l.as_ref()).ok())
        .map(|t| vocab.encode(&t))
        .collect();
    let lm = NGramLM::train(&vocab, &ids, order, Smoothing { k })?;
    Ok((vocab, lm))
}

/// Input and summary ids of each pseudo-groundtruth pair.
pub fn encode_pairs(pairs: &[PseudoPair], vocab: &Vocab) -> Vec<(Vec<usize>, Vec<usize>)> {
    let enc = |s: &str| vocab.encode(&tokenize(s).unwrap_or_default());
    pairs.iter().map(|p| (enc(&p.input), enc(&p.summary))).collect()
}

/// Per-sample wall-clock time in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTiming {
    pub forward_us: f64,
    pub decode_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summaries {
    pub lines: Vec<String>,
    /// Present when timing was requested; samples then run one at a time.
    pub timings: Option<Vec<SampleTiming>>,
}

fn summarize_one(params: &ModelParams, vocab: &Vocab, line: &str, config: &DecodeConfig) -> std::result::Result<(String, SampleTiming), BoxError> {
    let tokens = tokenize(line).unwrap_or_default();
    if tokens.is_empty() {
        return Ok((String::new(), SampleTiming { forward_us: 0.0, decode_us: 0.0 }));
    }
    let mut ids = vocab.encode(&tokens);
    if ids.len() > params.config.max_len {
        log::warn!("input of {} tokens truncated to max_len {}", ids.len(), params.config.max_len);
        ids.truncate(params.config.max_len);
    }
    let t0 = Instant::now();
    let lattice = forward(params, &ids)?;
    let t1 = Instant::now();
    let words = decode(&lattice, config)?;
    let t2 = Instant::now();
    let text = vocab.decode(&words)?.join(" ");
    let timing = SampleTiming {
        forward_us: (t1 - t0).as_secs_f64() * 1e6,
        decode_us: (t2 - t1).as_secs_f64() * 1e6,
    };
    Ok((text, timing))
}

/// Summarizes every line; empty lines give empty summaries.
pub fn summarize_lines<S: AsRef<str> + Sync>(
    params: &ModelParams,
    vocab: &Vocab,
    lines: &[S],
    config: &DecodeConfig,
    timing: bool,
) -> std::result::Result<Summaries, BoxError> {
    let results: Vec<(String, SampleTiming)> = if timing {
        lines.iter().map(|l| summarize_one(params, vocab, l.as_ref(), config)).collect::<std::result::Result<_, _>>()?
    } else {
        lines.par_iter().map(|l| summarize_one(params, vocab, l.as_ref(), config)).collect::<std::result::Result<_, _>>()?
    };
    let (lines, times): (Vec<String>, Vec<SampleTiming>) = results.into_iter().unzip();
    Ok(Summaries { lines, timings: timing.then_some(times) })
}

/// `index<TAB>forward_us<TAB>decode_us<TAB>total_us` lines.
pub fn timing_tsv(timings: &[SampleTiming]) -> String {
    timings
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{i}\t{:.1}\t{:.1}\t{:.1}\n", t.forward_us, t.decode_us, t.forward_us + t.decode_us))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub vectors: PathBuf,
    pub workdir: PathBuf,
    /// Seeds search, initialization and shuffling.
    pub seed: u64,
    pub lm_order: usize,
    pub lm_k: f64,
    pub search: SearchConfig,
    /// `vocab_size` is replaced by the size of the built vocabulary.
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub decode: DecodeConfig,
}

impl PipelineConfig {
    pub fn new(corpus: PathBuf, vectors: PathBuf, workdir: PathBuf) -> Self {
        let length = 8;
        Self {
            corpus,
            vectors,
            workdir,
            seed: 0,
            lm_order: 4,
            lm_k: 0.1,
            search: SearchConfig { target_length: length, ..SearchConfig::default() },
            model: ModelConfig::desk(1),
            optim: OptimConfig::default(),
            decode: DecodeConfig { length, ..DecodeConfig::default() },
        }
    }

    /// Parses `key=value` lines; `#` starts a comment line. `length` sets both the
    /// search and decode lengths; `decode_length` overrides the latter.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| PipelineError::Config(format!("expected key=value, got {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| kv.remove(k);
        let path = |v: Option<String>, k: &str| v.map(PathBuf::from).ok_or_else(|| PipelineError::Config(format!("missing {k}")));
        let mut cfg = Self::new(path(take("corpus"), "corpus")?, path(take("vectors"), "vectors")?, path(take("workdir"), "workdir")?);

        fn parse<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| PipelineError::Config(format!("{k}: cannot parse {v:?}")))
        }
        macro_rules! set {
            ($key:literal => $field:expr) => {
                if let Some(v) = take($key) {
                    $field = parse($key, v)?;
                }
            };
        }
        set!("seed" => cfg.seed);
        if let Some(v) = take("length") {
            let t: usize = parse("length", v)?;
            cfg.search.target_length = t;
            cfg.decode.length = t;
        }
        set!("decode_length" => cfg.decode.length);
        set!("lm_order" => cfg.lm_order);
        set!("lm_k" => cfg.lm_k);
        set!("gamma" => cfg.search.gamma);
        set!("steps" => cfg.search.steps);
        set!("restarts" => cfg.search.restarts);
        set!("layers" => cfg.model.layers);
        set!("heads" => cfg.model.heads);
        set!("model_dim" => cfg.model.model_dim);
        set!("attn_dim" => cfg.model.attn_dim);
        set!("ffn_dim" => cfg.model.ffn_dim);
        set!("max_len" => cfg.model.max_len);
        if let Some(v) = take("positional") {
            cfg.model.positional = v.parse::<Positional>().map_err(PipelineError::Config)?;
        }
        set!("epochs" => cfg.optim.epochs);
        set!("batch_size" => cfg.optim.batch_size);
        set!("peak_lr" => cfg.optim.peak_lr);
        set!("warmup_steps" => cfg.optim.warmup_steps);
        set!("weight_decay" => cfg.optim.weight_decay);
        if let Some(v) = take("decoder") {
            cfg.decode.decoder = v.parse::<DecoderKind>().map_err(PipelineError::Config)?;
        }
        set!("beam" => cfg.decode.beam);
        if let Some(v) = take("mode") {
            cfg.decode.mode = v.parse::<CollapseMode>().map_err(PipelineError::Config)?;
        }
        if let Some(k) = kv.keys().next() {
            return Err(PipelineError::Config(format!("unknown key {k:?}")));
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let s = &self.search;
        let d = &self.decode;
        [
            format!("corpus={}", self.corpus.display()),
            format!("vectors={}", self.vectors.display()),
            format!("workdir={}", self.workdir.display()),
            format!("seed={}", self.seed),
            format!("length={}", s.target_length),
            format!("decode_length={}", d.length),
            format!("lm_order={}", self.lm_order),
            format!("lm_k={}", self.lm_k),
            format!("gamma={}", s.gamma),
            format!("steps={}", s.steps),
            format!("restarts={}", s.restarts),
            format!("layers={}", m.layers),
            format!("heads={}", m.heads),
            format!("model_dim={}", m.model_dim),
            format!("attn_dim={}", m.attn_dim),
            format!("ffn_dim={}", m.ffn_dim),
            format!("max_len={}", m.max_len),
            format!("positional={}", m.positional),
            format!("epochs={}", o.epochs),
            format!("batch_size={}", o.batch_size),
            format!("peak_lr={}", o.peak_lr),
            format!("warmup_steps={}", o.warmup_steps),
            format!("weight_decay={}", o.weight_decay),
            format!("decoder={}", d.decoder),
            format!("beam={}", d.beam),
            format!("mode={}", d.mode),
        ]
        .join("\n")
            + "\n"
    }

    /// Checks inputs exist and settings are coherent, before any stage runs.
    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("corpus", &self.corpus), ("vectors file", &self.vectors)] {
            if !p.is_file() {
                return Err(PipelineError::MissingPath { what, path: p.clone() });
            }
        }
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.search.target_length == 0 || self.decode.length == 0 {
            return bad("length must be at least 1".into());
        }
        if self.search.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.decode.length > self.model.max_len {
            return bad(format!("decode length {} exceeds max_len {}", self.decode.length, self.model.max_len));
        }
        if self.decode.beam == 0 {
            return bad("beam must be at least 1".into());
        }
        ModelConfig { vocab_size: 1, ..self.model.clone() }.validate().map_err(|e| PipelineError::Config(e.to_string()))
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: String,
    /// Artifact file name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub train: TrainReport,
    pub report: RougeReport,
    pub summaries: Vec<String>,
}

pub const ARTIFACTS: [&str; 9] = [
    "config.txt",
    "vocab.txt",
    "lm.bin",
    "pseudo.tsv",
    "model.ckpt",
    "train_log.tsv",
    "references.txt",
    "summaries.txt",
    "report.json",
];

/// Runs every stage, writing artifacts and `manifest.json` into the work directory.
pub fn cmd_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let dir = &config.workdir;
    stage("setup", fs::create_dir_all(dir))?;
    let file = |name: &str| dir.join(name);
    stage("setup", fs::write(file("config.txt"), config.to_kv()))?;

    log::info!("train-lm");
    let corpus = stage("train-lm", read_corpus(&config.corpus))?;
    let (vocab, lm) = stage("train-lm", train_lm_stage(&corpus, config.lm_order, config.lm_k))?;
    stage("train-lm", vocab.save(&file("vocab.txt")))?;
    stage("train-lm", lm.save(&file("lm.bin")))?;

    log::info!("search");
    let table = stage("search", EmbeddingTable::load(&config.vectors))?;
    let search_cfg = SearchConfig { rng_seed: config.seed, ..config.search.clone() };
    let scorer = Scorer { vocab: &vocab, lm: &lm, table: &table, gamma: search_cfg.gamma };
    stage("search", batch_search(&corpus, &search_cfg, &scorer, &file("pseudo.tsv")))?;

    log::info!("train-naus");
    let pairs = stage("train-naus", read_pairs(&file("pseudo.tsv")))?;
    let data = encode_pairs(&pairs, &vocab);
    let longest = data.iter().map(|(x, _)| x.len()).max().unwrap_or(1);
    let model_cfg = ModelConfig { vocab_size: vocab.num_words(), max_len: config.model.max_len.max(longest), ..config.model.clone() };
    let optim = OptimConfig { seed: config.seed, ..config.optim.clone() };
    let mut trained = stage("train-naus", train(&data, &model_cfg, &optim))?;
    // Summaries come from the stored f32 weights so reloading reproduces them.
    trained.params.round_to_f32();
    stage("train-naus", save_checkpoint(&trained.params, &file("model.ckpt")))?;
    let log_text: String = trained.report.epoch_losses.iter().enumerate().map(|(i, l)| format!("{}\t{l:?}\n", i + 1)).collect();
    stage("train-naus", fs::write(file("train_log.tsv"), log_text))?;

    log::info!("summarize");
    let inputs: Vec<&str> = pairs.iter().map(|p| p.input.as_str()).collect();
    let out = stage("summarize", summarize_lines(&trained.params, &vocab, &inputs, &config.decode, false))?;
    stage("summarize", fs::write(file("summaries.txt"), lines_text(&out.lines)))?;
    let refs: Vec<&str> = pairs.iter().map(|p| p.summary.as_str()).collect();
    stage("summarize", fs::write(file("references.txt"), lines_text(&refs)))?;

    log::info!("evaluate");
    let report = stage("evaluate", corpus_eval(&file("summaries.txt"), &file("references.txt"), Protocol::F1, None, None))?;
    stage("evaluate", fs::write(file("report.json"), report.to_json()))?;

    let mut artifacts = BTreeMap::new();
    for name in ARTIFACTS {
        artifacts.insert(name.to_string(), stage("manifest", sha256_file(&file(name)))?);
    }
    let manifest = Manifest { version: env!("CARGO_PKG_VERSION").to_string(), seed: config.seed, config: config.to_kv(), artifacts };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    stage("manifest", fs::write(file("manifest.json"), json))?;
    Ok(PipelineOutcome { manifest, train: trained.report, report, summaries: out.lines })
}

fn lines_text<S: AsRef<str>>(lines: &[S]) -> String {
    lines.iter().map(|l| format!("{}\n", l.as_ref())).collect()
}
