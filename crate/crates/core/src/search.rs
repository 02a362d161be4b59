//! Edit-based hill-climbing word extraction.
//!
//! A summary is a fixed-size subset of input positions (order preserved). Each
//! step swaps one selected and one unselected position and keeps the change only
//! if the objective `f_lm(y) * f_sim(y; x)^gamma` strictly improves.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::fluency::{LmError, NGramLM};
use crate::similarity::{clamped_cosine, EmbeddingTable, SimilarityError};
use crate::textkit::{tokenize, TextError, Vocab};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("no swap possible with {selected} of {len} words selected")]
    NoMovePossible { selected: usize, len: usize },
    #[error("target length must be at least 1")]
    ZeroLength,
    #[error("input is empty")]
    EmptyInput,
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SearchError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub target_length: usize,
    pub gamma: f64,
    pub steps: usize,
    pub restarts: usize,
    pub rng_seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { target_length: 8, gamma: 1.0, steps: 500, restarts: 1, rng_seed: 0 }
    }
}

/// The scoring models the objective is evaluated against.
pub struct Scorer<'a> {
    pub vocab: &'a Vocab,
    pub lm: &'a NGramLM,
    pub table: &'a EmbeddingTable,
    pub gamma: f64,
}

/// An input sentence with everything the objective needs precomputed.
pub struct PreparedInput {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    vectors: Vec<Vec<f64>>,
    embedding: Vec<f64>,
}

impl<'a> Scorer<'a> {
    pub fn prepare<S: AsRef<str>>(&self, tokens: &[S]) -> Result<PreparedInput> {
        if tokens.is_empty() {
            return Err(SearchError::EmptyInput);
        }
        let tokens: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        let ids = self.vocab.encode(&tokens);
        let vectors: Vec<Vec<f64>> = tokens.iter().map(|t| self.table.vector(t).into_owned()).collect();
        let embedding = self.table.sentence_embedding(&tokens)?;
        Ok(PreparedInput { tokens, ids, vectors, embedding })
    }

    /// Returns `(score, f_lm, f_sim)` for the masked summary.
    pub fn evaluate(&self, input: &PreparedInput, mask: &[bool]) -> Result<(f64, f64, f64)> {
        let ids: Vec<usize> = selected(&input.ids, mask).copied().collect();
        let f_lm = self.lm.fluency_score(&ids)?;
        let mut emb = vec![0.0; self.table.dim()];
        let mut n = 0usize;
        for v in selected(&input.vectors, mask) {
            n += 1;
            for (e, x) in emb.iter_mut().zip(v) {
                *e += x;
            }
        }
        if n == 0 {
            return Err(SearchError::EmptyInput);
        }
        emb.iter_mut().for_each(|e| *e /= n as f64);
        let f_sim = clamped_cosine(&emb, &input.embedding);
        Ok((objective_value(f_lm, f_sim, self.gamma), f_lm, f_sim))
    }
}

/// `f_lm * f_sim^gamma`.
pub fn objective_value(f_lm: f64, f_sim: f64, gamma: f64) -> f64 {
    f_lm * f_sim.powf(gamma)
}

fn selected<'t, T>(items: &'t [T], mask: &'t [bool]) -> impl Iterator<Item = &'t T> {
    items.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub mask: Vec<bool>,
    pub score: f64,
    pub f_lm: f64,
    pub f_sim: f64,
}

impl SearchState {
    pub fn new(scorer: &Scorer, input: &PreparedInput, mask: Vec<bool>) -> Result<Self> {
        let (score, f_lm, f_sim) = scorer.evaluate(input, &mask)?;
        Ok(Self { mask, score, f_lm, f_sim })
    }

    pub fn selected_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Recomputes the objective for a state's mask from scratch.
pub fn objective(state: &SearchState, input: &PreparedInput, scorer: &Scorer) -> Result<f64> {
    Ok(scorer.evaluate(input, &state.mask)?.0)
}

/// Flips one uniformly chosen selected position off and one unselected position on.
pub fn propose_swap<R: Rng + ?Sized>(mask: &[bool], rng: &mut R) -> Result<Vec<bool>> {
    let on: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let off: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    if on.is_empty() || off.is_empty() {
        return Err(SearchError::NoMovePossible { selected: on.len(), len: mask.len() });
    }
    let mut next = mask.to_vec();
    next[on[rng.random_range(0..on.len())]] = false;
    next[off[rng.random_range(0..off.len())]] = true;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub positions: Vec<usize>,
    pub summary: Vec<String>,
    pub score: f64,
    /// Objective of the winning restart: its initial state, then every accepted move.
    pub trace: Vec<f64>,
}

fn random_mask<R: Rng + ?Sized>(n: usize, t: usize, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; n];
    for i in sample(rng, n, t) {
        mask[i] = true;
    }
    mask
}

/// Hill climbing with the given RNG. Inputs no longer than the target length are
/// returned whole.
pub fn hill_climb_with<R: Rng + ?Sized>(
    input: &PreparedInput,
    config: &SearchConfig,
    scorer: &Scorer,
    rng: &mut R,
) -> Result<SearchOutcome> {
    let n = input.tokens.len();
    let t = config.target_length;
    if t == 0 {
        return Err(SearchError::ZeroLength);
    }
    if n <= t {
        let state = SearchState::new(scorer, input, vec![true; n])?;
        return Ok(SearchOutcome {
            positions: (0..n).collect(),
            summary: input.tokens.clone(),
            score: state.score,
            trace: vec![state.score],
        });
    }
    let mut best: Option<(SearchState, Vec<f64>)> = None;
    for _ in 0..config.restarts.max(1) {
        let mut state = SearchState::new(scorer, input, random_mask(n, t, rng))?;
        let mut trace = vec![state.score];
        for _ in 0..config.steps {
            let mask = propose_swap(&state.mask, rng)?;
            let candidate = SearchState::new(scorer, input, mask)?;
            if candidate.score > state.score {
                state = candidate;
                trace.push(state.score);
            }
        }
        if best.as_ref().is_none_or(|(b, _)| state.score > b.score) {
            best = Some((state, trace));
        }
    }
    let (state, trace) = best.expect("at least one restart");
    let positions = state.positions();
    let summary = positions.iter().map(|&i| input.tokens[i].clone()).collect();
    Ok(SearchOutcome { positions, summary, score: state.score, trace })
}

/// Seeded hill climbing over a tokenized input.
pub fn hill_climb<S: AsRef<str>>(tokens: &[S], config: &SearchConfig, scorer: &Scorer) -> Result<SearchOutcome> {
    let input = scorer.prepare(tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    hill_climb_with(&input, config, scorer, &mut rng)
}

/// RNG for the `index`th sentence of a batch run; independent of scheduling.
pub fn sentence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPair {
    pub input: String,
    pub summary: String,
    pub score: f64,
}

/// Searches every sentence in parallel; results are in input order.
pub fn search_corpus<S: AsRef<str> + Sync>(
    corpus: &[S],
    config: &SearchConfig,
    scorer: &Scorer,
) -> Result<Vec<PseudoPair>> {
    corpus
        .par_iter()
        .enumerate()
        .map(|(i, line)| {
            let tokens = tokenize(line.as_ref())?;
            let input = scorer.prepare(&tokens)?;
            let mut rng = sentence_rng(config.rng_seed, i as u64);
            let out = hill_climb_with(&input, config, scorer, &mut rng)?;
            Ok(PseudoPair { input: tokens.join(" "), summary: out.summary.join(" "), score: out.score })
        })
        .collect()
}

/// Writes `input<TAB>summary<TAB>score` lines for the corpus.
pub fn batch_search<S: AsRef<str> + Sync>(
    corpus: &[S],
    config: &SearchConfig,
    scorer: &Scorer,
    out_path: &Path,
) -> Result<usize> {
    let pairs = search_corpus(corpus, config, scorer)?;
    let mut out = BufWriter::new(File::create(out_path)?);
    for p in &pairs {
        writeln!(out, "{}\t{}\t{}", p.input, p.summary, p.score)?;
    }
    out.flush()?;
    Ok(pairs.len())
}

/// Reads a pseudo-groundtruth TSV written by [`batch_search`].
pub fn read_pairs(path: &Path) -> Result<Vec<PseudoPair>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let mut f = l.trim_end_matches('\r').split('\t');
            let bad = || io::Error::new(io::ErrorKind::InvalidData, format!("{}: line {}: expected 3 fields", path.display(), i + 1));
            let input = f.next().ok_or_else(bad)?.to_string();
            let summary = f.next().ok_or_else(bad)?.to_string();
            let score = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            Ok(PseudoPair { input, summary, score })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluency::Smoothing;
    use std::collections::HashSet;

    struct Toy {
        vocab: Vocab,
        lm: NGramLM,
        table: EmbeddingTable,
    }

    fn toy() -> Toy {
        let corpus = ["the cat sat on the mat", "a dog ran in the park", "the cat ran"];
        let vocab = Vocab::build(corpus, 1).unwrap();
        let ids: Vec<Vec<usize>> = corpus.iter().map(|s| vocab.encode(&tokenize(s).unwrap())).collect();
        let lm = NGramLM::train(&vocab, &ids, 2, Smoothing::default()).unwrap();
        let table = EmbeddingTable::from_vectors(3, [
            ("cat".to_string(), vec![1.0, 0.0, 0.2]),
            ("dog".to_string(), vec![0.9, 0.1, 0.0]),
            ("mat".to_string(), vec![0.0, 1.0, 0.3]),
            ("park".to_string(), vec![0.1, 0.8, 0.1]),
            ("the".to_string(), vec![0.05, 0.05, 0.05]),
        ])
        .unwrap();
        Toy { vocab, lm, table }
    }

    fn scorer(t: &Toy, gamma: f64) -> Scorer<'_> {
        Scorer { vocab: &t.vocab, lm: &t.lm, table: &t.table, gamma }
    }

    fn words(s: &str) -> Vec<String> {
        tokenize(s).unwrap()
    }

    #[test]
    fn objective_formula() {
        assert!((objective_value(0.5, 0.8, 2.0) - 0.32).abs() < 1e-15);
        let t = toy();
        let input = scorer(&t, 0.0).prepare(&words("the cat sat on the mat")).unwrap();
        let mask = vec![true, true, false, false, true, true];
        let st = SearchState::new(&scorer(&t, 0.0), &input, mask.clone()).unwrap();
        assert_eq!(st.score, st.f_lm);
        let ids: Vec<usize> = selected(&input.ids, &mask).copied().collect();
        assert_eq!(st.f_lm, t.lm.fluency_score(&ids).unwrap());

        let full = SearchState::new(&scorer(&t, 1.0), &input, vec![true; 6]).unwrap();
        assert_eq!(full.f_sim, 1.0);
        assert!((full.score - t.lm.fluency_score(&input.ids).unwrap()).abs() < 1e-15);
        assert_eq!(objective(&full, &input, &scorer(&t, 1.0)).unwrap(), full.score);
    }

    #[test]
    fn forced_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(propose_swap(&[true, false], &mut rng).unwrap(), vec![false, true]);
        assert!(matches!(propose_swap(&[true, true], &mut rng), Err(SearchError::NoMovePossible { .. })));
        assert!(matches!(propose_swap(&[false, false], &mut rng), Err(SearchError::NoMovePossible { .. })));
    }

    #[test]
    fn swaps_cover_every_legal_move() {
        let mask = vec![true, false, true, false, false];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let next = propose_swap(&mask, &mut rng).unwrap();
            let diff = mask.iter().zip(&next).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 2);
            assert_eq!(next.iter().filter(|&&m| m).count(), 2);
            seen.insert(next);
        }
        // 2 selected x 3 unselected.
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn zero_steps_returns_initial_selection() {
        let t = toy();
        let cfg = SearchConfig { target_length: 3, steps: 0, ..Default::default() };
        let out = hill_climb(&words("the cat sat on the mat"), &cfg, &scorer(&t, 1.0)).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.positions.len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let expected = random_mask(6, 3, &mut rng);
        let got: Vec<bool> = (0..6).map(|i| out.positions.contains(&i)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn short_input_returned_whole() {
        let t = toy();
        let cfg = SearchConfig { target_length: 5, ..Default::default() };
        let out = hill_climb(&words("the cat"), &cfg, &scorer(&t, 1.0)).unwrap();
        assert_eq!(out.summary, ["the", "cat"]);
    }

    #[test]
    fn trace_strictly_increases_and_is_subsequence() {
        let t = toy();
        for seed in 0..20 {
            let cfg = SearchConfig { target_length: 3, steps: 200, restarts: 2, rng_seed: seed, gamma: 1.0 };
            let toks = words("the cat sat on the mat in the park");
            let out = hill_climb(&toks, &cfg, &scorer(&t, 1.0)).unwrap();
            assert!(out.trace.windows(2).all(|w| w[1] > w[0]));
            assert_eq!(*out.trace.last().unwrap(), out.score);
            assert!(out.positions.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(out.summary.len(), 3);
        }
    }

    #[test]
    fn never_beats_brute_force() {
        let t = toy();
        let s = scorer(&t, 1.0);
        let toks = words("the cat ran in the park");
        let input = s.prepare(&toks).unwrap();
        let mut best = f64::NEG_INFINITY;
        for bits in 0u32..64 {
            if bits.count_ones() == 3 {
                let mask: Vec<bool> = (0..6).map(|i| bits >> i & 1 == 1).collect();
                best = best.max(s.evaluate(&input, &mask).unwrap().0);
            }
        }
        let cfg = SearchConfig { target_length: 3, steps: 100, restarts: 3, rng_seed: 3, gamma: 1.0 };
        let out = hill_climb(&toks, &cfg, &s).unwrap();
        assert!(out.score <= best);
    }

    #[test]
    fn batch_search_is_deterministic() {
        let t = toy();
        let dir = tempfile::tempdir().unwrap();
        let corpus = ["the cat sat on the mat", "a dog ran in the park", "cat"];
        let cfg = SearchConfig { target_length: 3, steps: 50, ..Default::default() };
        let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
        assert_eq!(batch_search(&corpus, &cfg, &scorer(&t, 1.0), &a).unwrap(), 3);
        batch_search(&corpus, &cfg, &scorer(&t, 1.0), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let pairs = read_pairs(&a).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[2].summary, "cat");
        assert_eq!(pairs[0].summary.split(' ').count(), 3);
    }
}
