//! Tokenization, vocabulary construction and corpus ingestion.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

/// Surface spelling of the blank token in files and decoded output.
pub const BLANK_TOKEN: &str = "<eps>";
/// Surface spelling of the unknown-word token.
pub const UNK_TOKEN: &str = "<unk>";

const VOCAB_MAGIC: &str = "NAUSVOCAB 1";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("input is empty after tokenization")]
    EmptyInput,
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("token id {0} is out of range")]
    InvalidId(usize),
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("malformed vocabulary file at line {line}: {reason}")]
    BadVocabFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TextError>;

/// Lowercases, splits on whitespace and detaches punctuation.
///
/// Every non-alphanumeric character becomes its own token, except an
/// apostrophe sitting between two alphanumeric characters (`don't`).
pub fn tokenize(raw: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    for chunk in raw.split_whitespace() {
        let chars: Vec<char> = chunk.to_lowercase().chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let inner_apostrophe = (c == '\'' || c == '\u{2019}')
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if c.is_alphanumeric() || inner_apostrophe {
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    if tokens.is_empty() {
        return Err(TextError::EmptyInput);
    }
    Ok(tokens)
}

/// Token/id map with a reserved blank (the last id) and an unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    blank_id: usize,
    unk_id: usize,
}

impl Vocab {
    /// Builds from `(token, count)` pairs in id order, appending `<unk>` and `<eps>`.
    fn from_words(words: Vec<(String, u64)>) -> Self {
        let mut tokens = Vec::with_capacity(words.len() + 2);
        let mut counts = Vec::with_capacity(words.len() + 2);
        for (w, c) in words {
            tokens.push(w);
            counts.push(c);
        }
        let unk_id = tokens.len();
        tokens.push(UNK_TOKEN.to_string());
        counts.push(0);
        let blank_id = tokens.len();
        tokens.push(BLANK_TOKEN.to_string());
        counts.push(0);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, counts, index, blank_id, unk_id }
    }

    /// Counts tokens across `corpus` and keeps those seen at least `min_count` times.
    ///
    /// Ordering is by descending count, ties broken lexicographically.
    pub fn build<I, S>(corpus: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count < 1 {
            return Err(TextError::InvalidMinCount);
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            let Ok(toks) = tokenize(line.as_ref()) else { continue };
            for t in toks {
                *freq.entry(t).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut words: Vec<(String, u64)> = freq
            .into_iter()
            .filter(|(t, c)| *c >= min_count && t != UNK_TOKEN && t != BLANK_TOKEN)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_words(words))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of output classes other than the blank (words plus `<unk>`).
    pub fn num_words(&self) -> usize {
        self.blank_id
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn count(&self, id: usize) -> Option<u64> {
        self.counts.get(id).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Maps tokens to ids; unknown tokens (and any literal `<eps>`) become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| match self.index.get(t.as_ref()) {
                Some(&id) if id != self.blank_id => id,
                _ => self.unk_id,
            })
            .collect()
    }

    /// Maps ids back to surface tokens; the blank renders as `<eps>`.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| self.tokens.get(id).cloned().ok_or(TextError::InvalidId(id)))
            .collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{VOCAB_MAGIC}")?;
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            writeln!(out, "{t}\t{c}")?;
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let bad = |line: usize, reason: &str| TextError::BadVocabFile { line, reason: reason.to_string() };
        let header = lines.next().transpose()?;
        if header.as_deref().map(|h| h.trim_end_matches('\r')) != Some(VOCAB_MAGIC) {
            return Err(bad(1, "missing NAUSVOCAB 1 header"));
        }
        let mut words = Vec::new();
        let (mut saw_unk, mut saw_blank) = (false, false);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let lineno = i + 2;
            let (tok, count) = line.split_once('\t').ok_or_else(|| bad(lineno, "expected token<TAB>count"))?;
            let count: u64 = count.parse().map_err(|_| bad(lineno, "count is not an integer"))?;
            match tok {
                UNK_TOKEN => saw_unk = true,
                BLANK_TOKEN => saw_blank = true,
                _ if saw_unk || saw_blank => return Err(bad(lineno, "word after sentinel entries")),
                _ => words.push((tok.to_string(), count)),
            }
        }
        if !(saw_unk && saw_blank) {
            return Err(bad(0, "missing <unk> or <eps> entry"));
        }
        Ok(Self::from_words(words))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// A tokenized input with its original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub raw: String,
}

impl Sentence {
    pub fn new(raw: &str, vocab: &Vocab) -> Result<Self> {
        let tokens = tokenize(raw)?;
        let ids = vocab.encode(&tokens);
        Ok(Self { ids, tokens, raw: raw.to_string() })
    }
}

/// Streams non-blank lines of a UTF-8 corpus file, with CRLF normalized.
pub fn load_corpus(path: &Path) -> Result<impl Iterator<Item = Result<String>>> {
    let reader = BufReader::new(File::open(path)?);
    Ok(reader.lines().filter_map(|line| match line {
        Ok(l) => {
            let l = l.trim_end_matches('\r');
            if l.trim().is_empty() {
                None
            } else {
                Some(Ok(l.to_string()))
            }
        }
        Err(e) => Some(Err(TextError::from(e))),
    }))
}

/// Reads the whole corpus into memory.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    load_corpus(path)?.collect()
}
