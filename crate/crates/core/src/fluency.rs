//! Add-k smoothed n-gram language model used as the fluency term of the
//! search objective.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::textkit::Vocab;

const LM_MAGIC: &[u8] = b"NAUSLM 1\n";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("corpus contains no sentences")]
    EmptyCorpus,
    #[error("n-gram order must be in 1..=5, got {0}")]
    InvalidOrder(usize),
    #[error("smoothing constant must be finite and non-negative")]
    InvalidSmoothing,
    #[error("token sequence contains the blank token")]
    TokenContainsBlank,
    #[error("cannot score an empty token sequence")]
    EmptyInput,
    #[error("corrupt language model file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, LmError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothing {
    pub k: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self { k: 0.1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// n-gram model over word ids `0..num_words`, with an optional end-of-sentence
/// outcome.
///
/// P(w | h) = (c(h, w) + k) / (c(h) + k |V|) where h is the longest observed
/// suffix of the padded context. Contexts never seen in training back off to
/// shorter ones (the empty context is always observed), so each conditional
/// stays a proper distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    order: usize,
    smoothing: Smoothing,
    num_words: u32,
    end_marker: bool,
    contexts: HashMap<Vec<u32>, ContextCounts>,
    blank_id: Option<u32>,
}

impl NGramLM {
    /// Trains over the vocabulary's non-blank entries plus an end-of-sentence outcome.
    pub fn train(vocab: &Vocab, corpus: &[Vec<usize>], order: usize, smoothing: Smoothing) -> Result<Self> {
        let mut lm = Self::from_ids(corpus, vocab.num_words(), order, smoothing, true)?;
        lm.blank_id = Some(vocab.blank_id() as u32);
        Ok(lm)
    }

    /// Trains directly over ids `0..num_words`. Ids outside that range are rejected
    /// as blank.
    pub fn from_ids(
        corpus: &[Vec<usize>],
        num_words: usize,
        order: usize,
        smoothing: Smoothing,
        end_marker: bool,
    ) -> Result<Self> {
        if !(1..=5).contains(&order) {
            return Err(LmError::InvalidOrder(order));
        }
        if !smoothing.k.is_finite() || smoothing.k < 0.0 {
            return Err(LmError::InvalidSmoothing);
        }
        let mut lm = Self {
            order,
            smoothing,
            num_words: num_words as u32,
            end_marker,
            contexts: HashMap::new(),
            blank_id: None,
        };
        let mut any = false;
        for sentence in corpus.iter().filter(|s| !s.is_empty()) {
            any = true;
            let padded = lm.pad(sentence)?;
            for i in (order - 1)..padded.len() {
                let w = padded[i];
                for ctx_len in 0..order {
                    let ctx = padded[i - ctx_len..i].to_vec();
                    let entry = lm.contexts.entry(ctx).or_default();
                    entry.total += 1;
                    *entry.next.entry(w).or_insert(0) += 1;
                }
            }
        }
        if !any {
            return Err(LmError::EmptyCorpus);
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    fn eos(&self) -> u32 {
        self.num_words
    }

    fn bos(&self) -> u32 {
        self.num_words + 1
    }

    /// Size of the outcome set each conditional distribution ranges over.
    pub fn outcomes(&self) -> usize {
        self.num_words as usize + usize::from(self.end_marker)
    }

    fn check(&self, id: usize) -> Result<u32> {
        if id >= self.num_words as usize || self.blank_id == Some(id as u32) {
            return Err(LmError::TokenContainsBlank);
        }
        Ok(id as u32)
    }

    fn pad(&self, tokens: &[usize]) -> Result<Vec<u32>> {
        let mut padded = vec![self.bos(); self.order - 1];
        for &t in tokens {
            padded.push(self.check(t)?);
        }
        if self.end_marker {
            padded.push(self.eos());
        }
        Ok(padded)
    }

    /// Conditional probability of outcome `word` after `history` (most recent last).
    fn cond_prob(&self, history: &[u32], word: u32) -> f64 {
        let max_ctx = (self.order - 1).min(history.len());
        for ctx_len in (0..=max_ctx).rev() {
            let ctx = &history[history.len() - ctx_len..];
            if let Some(cc) = self.contexts.get(ctx) {
                if cc.total == 0 {
                    continue;
                }
                let c = cc.next.get(&word).copied().unwrap_or(0) as f64;
                let k = self.smoothing.k;
                return (c + k) / (cc.total as f64 + k * self.outcomes() as f64);
            }
        }
        0.0
    }

    /// Probability of `word` (an id, or `None` for end of sentence) after `history`.
    pub fn prob(&self, history: &[usize], word: Option<usize>) -> Result<f64> {
        let mut h = vec![self.bos(); self.order - 1];
        for &t in history {
            h.push(self.check(t)?);
        }
        let w = match word {
            Some(w) => self.check(w)?,
            None => self.eos(),
        };
        Ok(self.cond_prob(&h, w))
    }

    /// Natural-log probability of the sentence, including the end transition when
    /// the model has one.
    pub fn log_prob(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(LmError::EmptyInput);
        }
        let padded = self.pad(tokens)?;
        let start = self.order - 1;
        Ok((start..padded.len())
            .map(|i| self.cond_prob(&padded[..i], padded[i]).ln())
            .sum())
    }

    /// Number of predicted transitions scoring `len` tokens.
    pub fn transitions(&self, len: usize) -> usize {
        len + usize::from(self.end_marker)
    }

    /// Reciprocal perplexity: exp(log_prob / m) with m the number of transitions.
    pub fn fluency_score(&self, tokens: &[usize]) -> Result<f64> {
        let lp = self.log_prob(tokens)?;
        Ok((lp / self.transitions(tokens.len()) as f64).exp())
    }

    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(LM_MAGIC)?;
        out.write_all(&(self.order as u32).to_le_bytes())?;
        out.write_all(&self.smoothing.k.to_le_bytes())?;
        out.write_all(&self.num_words.to_le_bytes())?;
        out.write_all(&[u8::from(self.end_marker)])?;
        out.write_all(&self.blank_id.map_or(u32::MAX, |b| b).to_le_bytes())?;
        let mut ctxs: Vec<_> = self.contexts.iter().collect();
        ctxs.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(b.0)));
        out.write_all(&(ctxs.len() as u64).to_le_bytes())?;
        for (ctx, cc) in ctxs {
            out.write_all(&[ctx.len() as u8])?;
            for &c in ctx {
                out.write_all(&c.to_le_bytes())?;
            }
            let mut next: Vec<_> = cc.next.iter().collect();
            next.sort();
            out.write_all(&(next.len() as u32).to_le_bytes())?;
            for (&w, &c) in next {
                out.write_all(&w.to_le_bytes())?;
                out.write_all(&c.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let mut r = ByteReader { buf: &buf, pos: 0 };
        if r.take(LM_MAGIC.len())? != LM_MAGIC {
            return Err(LmError::CorruptFile("bad magic".into()));
        }
        let order = r.u32()? as usize;
        let k = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let num_words = r.u32()?;
        let end_marker = r.take(1)?[0] != 0;
        let blank = r.u32()?;
        if !(1..=5).contains(&order) || !k.is_finite() || k < 0.0 {
            return Err(LmError::CorruptFile("invalid header".into()));
        }
        let n_ctx = r.u64()?;
        let mut contexts = HashMap::new();
        for _ in 0..n_ctx {
            let len = r.take(1)?[0] as usize;
            let ctx = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n_next = r.u32()?;
            let mut cc = ContextCounts::default();
            for _ in 0..n_next {
                let w = r.u32()?;
                let c = r.u64()?;
                cc.total += c;
                cc.next.insert(w, c);
            }
            contexts.insert(ctx, cc);
        }
        if r.pos != buf.len() {
            return Err(LmError::CorruptFile("trailing bytes".into()));
        }
        Ok(Self {
            order,
            smoothing: Smoothing { k },
            num_words,
            end_marker,
            contexts,
            blank_id: (blank != u32::MAX).then_some(blank),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| LmError::CorruptFile("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const AB: &[usize] = &[0, 1];

    fn addk_bigram() -> NGramLM {
        NGramLM::from_ids(&[AB.to_vec(), AB.to_vec()], 2, 2, Smoothing { k: 1.0 }, false).unwrap()
    }

    #[test]
    fn add_k_bigram_hand_count() {
        let lm = addk_bigram();
        // c(a b) = 2, c(a) = 2, |V| = 2.
        assert!((lm.prob(&[0], Some(1)).unwrap() - 0.75).abs() < 1e-15);
        // c(<s> a) = 2, c(<s>) = 2.
        let p_a_start = lm.prob(&[], Some(0)).unwrap();
        assert!((p_a_start - 0.75).abs() < 1e-15);
        let lp = lm.log_prob(AB).unwrap();
        assert!((lp - (0.75f64.ln() + p_a_start.ln())).abs() < 1e-12);
    }

    #[test]
    fn unigram_without_smoothing() {
        let lm = NGramLM::from_ids(&[vec![0]], 1, 1, Smoothing { k: 0.0 }, false).unwrap();
        assert_eq!(lm.prob(&[], Some(0)).unwrap(), 1.0);
    }

    #[test]
    fn deterministic_sentence_scores_one() {
        let s = vec![0, 1, 2, 3];
        let lm = NGramLM::from_ids(std::slice::from_ref(&s), 4, 3, Smoothing { k: 0.0 }, true).unwrap();
        assert_eq!(lm.log_prob(&s).unwrap(), 0.0);
        assert_eq!(lm.fluency_score(&s).unwrap(), 1.0);
    }

    #[test]
    fn fluency_is_geometric_mean_of_conditionals() {
        let corpus = vec![vec![0, 1, 2], vec![0, 2], vec![1, 1, 0, 2]];
        let lm = NGramLM::from_ids(&corpus, 3, 2, Smoothing { k: 0.5 }, false).unwrap();
        let s = [0, 2, 1];
        // Context counts: <s> -> {a:2, b:1}; a -> {b:1, c:2}; c is never a context,
        // so P(b | c) backs off to the unigram table (9 tokens, b seen 3 times).
        let p1: f64 = (2.0 + 0.5) / (3.0 + 1.5);
        let p2 = (2.0 + 0.5) / (3.0 + 1.5);
        let unigram_total = 9.0;
        let p3 = (3.0 + 0.5) / (unigram_total + 1.5);
        let expected = (p1 * p2 * p3).powf(1.0 / 3.0);
        assert!((lm.fluency_score(&s).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn half_probability_steps() {
        // Uniform unigram over two words, no smoothing, no end marker.
        let lm = NGramLM::from_ids(&[vec![0, 1]], 2, 1, Smoothing { k: 0.0 }, false).unwrap();
        assert!((lm.fluency_score(&[0, 1, 1]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn distributions_normalize() {
        let corpus = vec![vec![0, 1, 2, 1], vec![2, 2, 0], vec![3]];
        for order in 1..=4 {
            let lm = NGramLM::from_ids(&corpus, 4, order, Smoothing { k: 0.1 }, true).unwrap();
            for hist in [vec![], vec![0], vec![2, 2], vec![3, 3, 3], vec![0, 1, 2]] {
                let mut total = lm.prob(&hist, None).unwrap();
                for w in 0..4 {
                    total += lm.prob(&hist, Some(w)).unwrap();
                }
                assert!((total - 1.0).abs() < 1e-9, "order {order} hist {hist:?}: {total}");
            }
        }
    }

    #[test]
    fn vocab_training_scores_oov_as_finite() {
        let vocab = Vocab::build(["the cat sat", "the dog sat"], 1).unwrap();
        let corpus: Vec<Vec<usize>> = ["the cat sat", "the dog sat"]
            .iter()
            .map(|s| vocab.encode(&crate::textkit::tokenize(s).unwrap()))
            .collect();
        let lm = NGramLM::train(&vocab, &corpus, 4, Smoothing::default()).unwrap();
        let ids = vocab.encode(&["the", "zebra", "sat"]);
        assert!(lm.log_prob(&ids).unwrap().is_finite());
        let f = lm.fluency_score(&ids).unwrap();
        assert!(f > 0.0 && f <= 1.0);
        assert!(matches!(lm.log_prob(&[vocab.blank_id()]), Err(LmError::TokenContainsBlank)));
        assert!(matches!(lm.log_prob(&[]), Err(LmError::EmptyInput)));
    }

    #[test]
    fn training_errors() {
        assert!(matches!(NGramLM::from_ids(&[], 2, 2, Smoothing::default(), true), Err(LmError::EmptyCorpus)));
        assert!(matches!(
            NGramLM::from_ids(&[vec![0]], 2, 6, Smoothing::default(), true),
            Err(LmError::InvalidOrder(6))
        ));
    }

    #[test]
    fn retraining_is_bit_identical_and_round_trips() {
        let corpus = vec![vec![0, 1, 2, 1], vec![2, 2, 0]];
        let a = NGramLM::from_ids(&corpus, 3, 3, Smoothing::default(), true).unwrap();
        let b = NGramLM::from_ids(&corpus, 3, 3, Smoothing::default(), true).unwrap();
        let s = [2, 1, 0];
        assert_eq!(a.log_prob(&s).unwrap().to_bits(), b.log_prob(&s).unwrap().to_bits());
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write(&mut ba).unwrap();
        b.write(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let back = NGramLM::read(&ba[..]).unwrap();
        assert_eq!(back, a);
        assert!(matches!(NGramLM::read(&ba[..ba.len() - 3]), Err(LmError::CorruptFile(_))));
    }

    #[test]
    fn unigram_scores_depend_only_on_multiset() {
        let corpus = vec![vec![0, 1, 2, 3]];
        let lm = NGramLM::from_ids(&corpus, 4, 1, Smoothing { k: 0.1 }, true).unwrap();
        let a = lm.fluency_score(&[0, 1, 2]).unwrap();
        let b = lm.fluency_score(&[2, 0, 1]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }
}
