//! Mean-pooled word-vector sentence embeddings and the clamped cosine
//! similarity used by the search objective.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Lower clamp applied to cosine similarity so that `sim^gamma` stays positive.
pub const SIMILARITY_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("line {line}: expected dimension {expected}, found {found}")]
    InconsistentDimension { line: usize, expected: usize, found: usize },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("word-vector file contains no vectors")]
    NoVectors,
    #[error("cannot embed an empty token sequence")]
    EmptyInput,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SimilarityError>;

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: HashMap::new() }
    }

    pub fn from_vectors<I: IntoIterator<Item = (String, Vec<f64>)>>(dim: usize, entries: I) -> Result<Self> {
        let mut table = Self::new(dim);
        for (i, (tok, v)) in entries.into_iter().enumerate() {
            table.insert(i + 1, tok, v)?;
        }
        Ok(table)
    }

    fn insert(&mut self, line: usize, token: String, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(SimilarityError::InconsistentDimension { line, expected: self.dim, found: v.len() });
        }
        if self.vectors.insert(token.clone(), v).is_some() {
            log::warn!("duplicate vector for {token:?} at line {line}; keeping the later one");
        }
        Ok(())
    }

    /// Parses `token v1 ... vd` lines. A leading `count dim` header line is accepted.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let rest: Vec<&str> = fields.collect();
            if i == 0 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
                table = Some(Self::new(rest[0].parse().unwrap()));
                continue;
            }
            let v = rest
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| SimilarityError::Parse { line: lineno, reason: format!("bad component: {e}") })?;
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(SimilarityError::Parse { line: lineno, reason: "missing or non-finite components".into() });
            }
            let t = table.get_or_insert_with(|| Self::new(v.len()));
            t.insert(lineno, token.to_string(), v)?;
        }
        table.filter(|t| !t.vectors.is_empty()).ok_or(SimilarityError::NoVectors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// All stored vectors, sorted by token.
    pub fn entries(&self) -> Vec<(&str, &[f64])> {
        let mut e: Vec<_> = self.vectors.iter().map(|(t, v)| (t.as_str(), v.as_slice())).collect();
        e.sort_unstable_by(|a, b| a.0.cmp(b.0));
        e
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Unit vector seeded from a hash of the token string.
    pub fn default_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    /// Vector for `token`, falling back to the hash-seeded default.
    pub fn vector(&self, token: &str) -> std::borrow::Cow<'_, [f64]> {
        match self.vectors.get(token) {
            Some(v) => std::borrow::Cow::Borrowed(v),
            None => std::borrow::Cow::Owned(self.default_vector(token)),
        }
    }

    /// Arithmetic mean of the token vectors.
    pub fn sentence_embedding<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(SimilarityError::EmptyInput);
        }
        let mut acc = vec![0.0; self.dim];
        for t in tokens {
            for (a, x) in acc.iter_mut().zip(self.vector(t.as_ref()).iter()) {
                *a += x;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

/// Cosine of two vectors clamped to `[SIMILARITY_FLOOR, 1]`; zero vectors give the floor.
pub fn clamped_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    let denom = (na * nb).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return SIMILARITY_FLOOR;
    }
    (dot / denom).clamp(SIMILARITY_FLOOR, 1.0)
}

/// Similarity of a summary to its source under mean-pooled embeddings.
pub fn similarity_score<S: AsRef<str>, T: AsRef<str>>(x: &[S], y: &[T], table: &EmbeddingTable) -> Result<f64> {
    let ex = table.sentence_embedding(x)?;
    let ey = table.sentence_embedding(y)?;
    Ok(clamped_cosine(&ex, &ey))
}
