//! Encoder-only transformer whose output slots align one-to-one with the input
//! tokens and predict a word or the blank at each slot.

mod checkpoint;
mod network;
mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ctc::CtcError;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use network::{forward, loss_and_grad, required_slots};
pub use train::{lr_at, train, OptimConfig, TrainReport, Trained};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("token id {0} is outside the model vocabulary")]
    TokenOutOfRange(usize),
    #[error("target needs {needed} slots but the input has {slots}")]
    TargetTooLong { needed: usize, slots: usize },
    #[error("every training pair was skipped")]
    AllPairsSkipped,
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Positional {
    #[default]
    Sinusoidal,
    Learned,
    None,
}

impl FromStr for Positional {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sinusoidal" => Ok(Self::Sinusoidal),
            "learned" => Ok(Self::Learned),
            "none" => Ok(Self::None),
            other => Err(format!("unknown positional encoding {other:?}")),
        }
    }
}

impl fmt::Display for Positional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sinusoidal => "sinusoidal",
            Self::Learned => "learned",
            Self::None => "none",
        })
    }
}

/// Architecture hyperparameters. `vocab_size` counts output classes other than
/// the blank; the blank is class `vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub attn_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub positional: Positional,
}

impl ModelConfig {
    /// Small defaults suitable for CPU training on toy corpora.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 64,
            attn_dim: 32,
            ffn_dim: 128,
            vocab_size,
            max_len: 64,
            positional: Positional::Sinusoidal,
        }
    }

    /// 6 layers, 8 heads, 512-dimensional attention and 2048-dimensional FFN.
    pub fn large(vocab_size: usize) -> Self {
        Self { layers: 6, heads: 8, model_dim: 512, attn_dim: 64, ffn_dim: 2048, vocab_size, max_len: 256, ..Self::desk(vocab_size) }
    }

    /// `d_k = d / h`.
    pub fn with_default_attn_dim(mut self) -> Self {
        self.attn_dim = self.model_dim / self.heads.max(1);
        self
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.attn_dim
    }

    pub fn output_dim(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return bad("layers, heads, model_dim and ffn_dim must be positive");
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be divisible by heads");
        }
        if self.attn_dim == 0 {
            return bad("attn_dim must be positive");
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return bad("vocab_size and max_len must be positive");
        }
        Ok(())
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "layers={}\nheads={}\nmodel_dim={}\nattn_dim={}\nffn_dim={}\nvocab_size={}\nmax_len={}\npositional={}\n",
            self.layers,
            self.heads,
            self.model_dim,
            self.attn_dim,
            self.ffn_dim,
            self.vocab_size,
            self.max_len,
            self.positional
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::desk(0);
        let mut seen = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<usize>().map_err(|_| ModelError::InvalidConfig(format!("{k}: not an integer")));
            match k {
                "layers" => cfg.layers = num()?,
                "heads" => cfg.heads = num()?,
                "model_dim" => cfg.model_dim = num()?,
                "attn_dim" => cfg.attn_dim = num()?,
                "ffn_dim" => cfg.ffn_dim = num()?,
                "vocab_size" => cfg.vocab_size = num()?,
                "max_len" => cfg.max_len = num()?,
                "positional" => cfg.positional = v.parse().map_err(ModelError::InvalidConfig)?,
                other => return Err(ModelError::InvalidConfig(format!("unknown key {other:?}"))),
            }
            seen += 1;
        }
        if seen == 0 {
            return Err(ModelError::InvalidConfig("empty config".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// (V+1) x d
    pub embed: Array2<f64>,
    /// max_len x d, present for learned positions only.
    pub pos: Option<Array2<f64>>,
    pub layers: Vec<LayerParams>,
    /// d x (V+1)
    pub out: Array2<f64>,
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

impl ModelParams {
    /// Xavier-uniform matrices, unit-variance embeddings, unit layer-norm gains
    /// and zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let inner = config.inner_dim();
        let sqrt3 = 3f64.sqrt();
        let embed = Array2::from_shape_simple_fn((config.output_dim(), d), || rng.random_range(-sqrt3..sqrt3));
        let pos = (config.positional == Positional::Learned)
            .then(|| Array2::from_shape_simple_fn((config.max_len, d), || rng.random_range(-0.1..0.1)));
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: xavier(d, inner, &mut rng),
                wk: xavier(d, inner, &mut rng),
                wv: xavier(d, inner, &mut rng),
                wo: xavier(inner, d, &mut rng),
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                w1: xavier(d, config.ffn_dim, &mut rng),
                b1: Array1::zeros(config.ffn_dim),
                w2: xavier(config.ffn_dim, d, &mut rng),
                b2: Array1::zeros(d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
            })
            .collect();
        let out = xavier(d, config.output_dim(), &mut rng);
        Ok(Self { config: config.clone(), embed, pos, layers, out })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    /// Parameter blocks in checkpoint order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.embed.as_slice().expect("standard layout")];
        if let Some(p) = &self.pos {
            v.push(p.as_slice().expect("standard layout"));
        }
        for l in &self.layers {
            for b in [&l.wq, &l.wk, &l.wv, &l.wo] {
                v.push(b.as_slice().expect("standard layout"));
            }
            v.push(l.ln1_gain.as_slice().unwrap());
            v.push(l.ln1_bias.as_slice().unwrap());
            v.push(l.w1.as_slice().unwrap());
            v.push(l.b1.as_slice().unwrap());
            v.push(l.w2.as_slice().unwrap());
            v.push(l.b2.as_slice().unwrap());
            v.push(l.ln2_gain.as_slice().unwrap());
            v.push(l.ln2_bias.as_slice().unwrap());
        }
        v.push(self.out.as_slice().expect("standard layout"));
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.embed.as_slice_mut().expect("standard layout")];
        if let Some(p) = &mut self.pos {
            v.push(p.as_slice_mut().expect("standard layout"));
        }
        for l in &mut self.layers {
            v.push(l.wq.as_slice_mut().unwrap());
            v.push(l.wk.as_slice_mut().unwrap());
            v.push(l.wv.as_slice_mut().unwrap());
            v.push(l.wo.as_slice_mut().unwrap());
            v.push(l.ln1_gain.as_slice_mut().unwrap());
            v.push(l.ln1_bias.as_slice_mut().unwrap());
            v.push(l.w1.as_slice_mut().unwrap());
            v.push(l.b1.as_slice_mut().unwrap());
            v.push(l.w2.as_slice_mut().unwrap());
            v.push(l.b2.as_slice_mut().unwrap());
            v.push(l.ln2_gain.as_slice_mut().unwrap());
            v.push(l.ln2_bias.as_slice_mut().unwrap());
        }
        v.push(self.out.as_slice_mut().expect("standard layout"));
        v
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Parameter at a flat index across all blocks.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for b in self.blocks() {
            if index < b.len() {
                return b[index];
            }
            index -= b.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for b in self.blocks_mut() {
            if index < b.len() {
                b[index] = value;
                return;
            }
            index -= b.len();
        }
        panic!("flat index out of range");
    }

    /// `self += other`, block by block in fixed order.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Rounds every parameter to the nearest 32-bit float, the precision kept by
    /// checkpoints.
    pub fn round_to_f32(&mut self) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}
