//! Per-slot log-probability lattices produced by the encoder and consumed by
//! every decoder. The blank token is always the last column.

use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("lattice must have at least one slot and two columns")]
    Empty,
    #[error("row {row} has {found} entries, expected {expected}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("row {row} is not normalized (log-sum-exp = {lse})")]
    NotNormalized { row: usize, lse: f64 },
    #[error("malformed lattice text: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, LatticeError>;

/// Numerically stable `log(exp(a) + exp(b))` that treats `-inf` as zero mass.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// S x (V+1) matrix of log-probabilities in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice {
    slots: usize,
    width: usize,
    data: Vec<f64>,
}

impl LogProbLattice {
    /// Builds from log-probability rows; each row must log-sum-exp to 0 within 1e-6.
    pub fn from_log_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let slots = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if slots == 0 || width < 2 {
            return Err(LatticeError::Empty);
        }
        let mut data = Vec::with_capacity(slots * width);
        for (row, r) in rows.into_iter().enumerate() {
            if r.len() != width {
                return Err(LatticeError::RaggedRow { row, expected: width, found: r.len() });
            }
            let lse = log_sum_exp(&r);
            if lse.is_nan() || lse.abs() > 1e-6 {
                return Err(LatticeError::NotNormalized { row, lse });
            }
            data.extend(r);
        }
        Ok(Self { slots, width, data })
    }

    /// Builds from probability rows (zeros allowed, mapped to `-inf`).
    pub fn from_prob_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_log_rows(rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect())
    }

    /// Wraps already-normalized row-major data without checking.
    pub(crate) fn from_raw(slots: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), slots * width);
        Self { slots, width, data }
    }

    /// A random lattice with `words` non-blank columns; each row is the softmax of
    /// logits drawn uniformly from `[-spread, spread)`.
    pub fn random<R: Rng + ?Sized>(slots: usize, words: usize, spread: f64, rng: &mut R) -> Self {
        let width = words + 1;
        let mut data = Vec::with_capacity(slots * width);
        for _ in 0..slots {
            let logits: Vec<f64> = (0..width).map(|_| rng.random_range(-spread..spread)).collect();
            let lse = log_sum_exp(&logits);
            data.extend(logits.iter().map(|l| l - lse));
        }
        Self { slots, width, data }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Columns per row, including the blank.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_words(&self) -> usize {
        self.width - 1
    }

    pub fn blank(&self) -> usize {
        self.width - 1
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.width..(s + 1) * self.width]
    }

    #[inline]
    pub fn get(&self, s: usize, token: usize) -> f64 {
        self.data[s * self.width + token]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.width)
    }

    /// Joint log-probability of a full token path, accumulated left to right.
    pub fn path_log_prob(&self, tokens: &[usize]) -> f64 {
        tokens.iter().enumerate().fold(0.0, |acc, (s, &tok)| acc + self.get(s, tok))
    }

    /// Debug text format: `S W` header then one row of log-probs per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.slots, self.width);
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| LatticeError::Parse("missing header".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| LatticeError::Parse(format!("bad header {header:?}"))))
            .collect::<Result<_>>()?;
        let [slots, width] = dims[..] else {
            return Err(LatticeError::Parse(format!("bad header {header:?}")));
        };
        let mut rows = Vec::with_capacity(slots);
        for line in lines {
            let row = line
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|_| LatticeError::Parse(format!("bad value {x:?}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.len() != slots {
            return Err(LatticeError::Parse(format!("expected {slots} rows, found {}", rows.len())));
        }
        let lattice = Self::from_log_rows(rows)?;
        if lattice.width != width {
            return Err(LatticeError::Parse(format!("expected width {width}, found {}", lattice.width)));
        }
        Ok(lattice)
    }
}
