//! Inference over a lattice: greedy, truncated greedy, CTC prefix beam search,
//! and the length-control dynamic program with a beam in every `(s, t)` cell.
//!
//! Length-control decoding fills cell `(s, t)` with the best `B` token paths of
//! length `s` that collapse to exactly `t` words. A cell draws candidates from
//! `(s-1, t)` by appending a blank or, when merging, repeating the previous word,
//! and from `(s-1, t-1)` by appending one of the `B` most probable words that is
//! neither blank nor (when merging) the previous token.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::str::FromStr;

use thiserror::Error;

use crate::ctc::{collapse, collapse_keep_repeats, for_each_path, CtcError};
use crate::lattice::{log_add_exp, LogProbLattice};

/// Beam size used when none is given.
pub const DEFAULT_BEAM: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("target length {target} exceeds the {slots} available slots")]
    TargetLongerThanSlots { target: usize, slots: usize },
    #[error("no token path of {slots} slots collapses to {target} words")]
    EmptyCell { slots: usize, target: usize },
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// How repeated adjacent words are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollapseMode {
    /// CTC collapse: merge repeats not separated by a blank, then drop blanks.
    #[default]
    Merge,
    /// Drop blanks only.
    NoMerge,
}

impl CollapseMode {
    pub fn apply(self, tokens: &[usize], blank: usize) -> Vec<usize> {
        match self {
            Self::Merge => collapse(tokens, blank),
            Self::NoMerge => collapse_keep_repeats(tokens, blank),
        }
    }
}

impl FromStr for CollapseMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "merge" => Ok(Self::Merge),
            "no_merge" | "no-merge" => Ok(Self::NoMerge),
            other => Err(format!("unknown collapse mode {other:?} (expected merge or no_merge)")),
        }
    }
}

impl std::fmt::Display for CollapseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Merge => "merge",
            Self::NoMerge => "no_merge",
        })
    }
}

/// A decoded token path.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logp: f64,
    pub last: Option<usize>,
    pub collapsed_len: usize,
}

impl Hypothesis {
    pub fn words(&self, blank: usize, mode: CollapseMode) -> Vec<usize> {
        mode.apply(&self.tokens, blank)
    }
}

/// Orders by log-probability descending, then token ids ascending.
pub fn rank(a_logp: f64, a_tokens: &[usize], b_logp: f64, b_tokens: &[usize]) -> Ordering {
    b_logp.total_cmp(&a_logp).then_with(|| a_tokens.cmp(b_tokens))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Per-slot argmax, then CTC collapse. Output length is uncontrolled.
pub fn greedy_decode(lattice: &LogProbLattice) -> Vec<usize> {
    let path: Vec<usize> = lattice.rows().map(argmax).collect();
    collapse(&path, lattice.blank())
}

/// Greedy output cut to its first `target` words.
pub fn truncate_decode(lattice: &LogProbLattice, target: usize) -> Vec<usize> {
    let mut words = greedy_decode(lattice);
    words.truncate(target);
    words
}

const ROOT: u32 = u32::MAX;

/// Back-pointer store for paths shared between beam cells.
struct PathArena {
    nodes: Vec<(u32, u32)>,
}

impl PathArena {
    fn push(&mut self, token: usize, parent: u32) -> u32 {
        self.nodes.push((token as u32, parent));
        (self.nodes.len() - 1) as u32
    }

    fn path(&self, mut node: u32) -> Vec<usize> {
        let mut out = Vec::new();
        while node != ROOT {
            let (tok, parent) = self.nodes[node as usize];
            out.push(tok as usize);
            node = parent;
        }
        out.reverse();
        out
    }
}

#[derive(Clone, Copy)]
struct BeamEntry {
    node: u32,
    logp: f64,
    last: Option<usize>,
}

#[derive(Clone, Copy)]
struct Candidate {
    parent: u32,
    token: usize,
    logp: f64,
}

fn rank_candidates(arena: &PathArena, a: &Candidate, b: &Candidate) -> Ordering {
    b.logp.total_cmp(&a.logp).then_with(|| {
        let mut pa = arena.path(a.parent);
        pa.push(a.token);
        let mut pb = arena.path(b.parent);
        pb.push(b.token);
        pa.cmp(&pb)
    })
}

/// The `take` best word columns of one slot, ordered by probability (descending,
/// ids ascending), in one pass over the row.
fn top_words(row: &[f64], blank: usize, take: usize, out: &mut Vec<usize>) {
    out.clear();
    for (i, &x) in row.iter().enumerate() {
        if i == blank || (out.len() == take && x <= row[out[take - 1]]) {
            continue;
        }
        // Ids arrive in ascending order, so ties stay behind earlier ids.
        let at = out.partition_point(|&j| row[j] >= x);
        if out.len() == take {
            out.pop();
        }
        out.insert(at, i);
    }
}

#[derive(PartialEq)]
struct Frontier {
    logp: f64,
    parent: usize,
    pos: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.logp.total_cmp(&other.logp).then(other.parent.cmp(&self.parent)).then(other.pos.cmp(&self.pos))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Appends the `beam` best (parent, new word) extensions, plus any tied with the
/// last of them, by a best-first merge of the per-parent word lists.
fn best_new_words(
    parents: &[BeamEntry],
    words: &[usize],
    row: &[f64],
    beam: usize,
    merge: bool,
    heap: &mut BinaryHeap<Frontier>,
    out: &mut Vec<Candidate>,
) {
    let next = |parent: &BeamEntry, from: usize| {
        let excluded = if merge { parent.last } else { None };
        (from..words.len()).find(|&j| Some(words[j]) != excluded)
    };
    heap.clear();
    for (i, h) in parents.iter().enumerate() {
        if let Some(pos) = next(h, 0) {
            heap.push(Frontier { logp: h.logp + row[words[pos]], parent: i, pos });
        }
    }
    let mut taken = 0;
    let mut cutoff = f64::NEG_INFINITY;
    while let Some(f) = heap.pop() {
        if taken >= beam && f.logp < cutoff {
            break;
        }
        let h = &parents[f.parent];
        out.push(Candidate { parent: h.node, token: words[f.pos], logp: f.logp });
        taken += 1;
        if taken == beam {
            cutoff = f.logp;
        }
        if let Some(pos) = next(h, f.pos + 1) {
            heap.push(Frontier { logp: h.logp + row[words[pos]], parent: f.parent, pos });
        }
    }
}

/// Fills the `(s, t)` beam table and returns the final cell `(S, T)`, best first.
pub fn length_control_beam(
    lattice: &LogProbLattice,
    target: usize,
    beam: usize,
    mode: CollapseMode,
) -> Result<Vec<Hypothesis>> {
    let slots = lattice.slots();
    if target > slots {
        return Err(DecodeError::TargetLongerThanSlots { target, slots });
    }
    if beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    let blank = lattice.blank();
    let merge = mode == CollapseMode::Merge;
    let single_word = merge && lattice.num_words() == 1;
    let mut arena = PathArena { nodes: Vec::with_capacity(slots * (target + 1) * beam) };
    // prev[t] holds the beam for (s-1, t); only t within reach of (S, T) is kept.
    let mut prev: Vec<Vec<BeamEntry>> = vec![Vec::new(); target + 1];
    prev[0].push(BeamEntry { node: ROOT, logp: 0.0, last: None });
    let mut cur: Vec<Vec<BeamEntry>> = vec![Vec::new(); target + 1];
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut words: Vec<usize> = Vec::with_capacity(beam + 1);
    let mut heap = BinaryHeap::with_capacity(beam);

    for s in 1..=slots {
        let row = lattice.row(s - 1);
        top_words(row, blank, beam + usize::from(merge), &mut words);
        let t_lo = target.saturating_sub(slots - s);
        let t_hi = s.min(target);
        cur.iter_mut().for_each(Vec::clear);
        for t in t_lo..=t_hi {
            candidates.clear();
            for h in &prev[t] {
                candidates.push(Candidate { parent: h.node, token: blank, logp: h.logp + row[blank] });
                if merge {
                    if let Some(last) = h.last.filter(|&l| l != blank) {
                        candidates.push(Candidate { parent: h.node, token: last, logp: h.logp + row[last] });
                    }
                }
            }
            if t >= 1 {
                best_new_words(&prev[t - 1], &words, row, beam, merge, &mut heap, &mut candidates);
            }
            if single_word {
                // Another word must follow a blank, so each new word costs two slots.
                let (left, needed) = (slots - s, target - t);
                candidates.retain(|c| needed == 0 || 2 * needed - usize::from(c.token == blank) <= left);
            }
            candidates.sort_unstable_by(|a, b| rank_candidates(&arena, a, b));
            candidates.truncate(beam);
            cur[t].extend(
                candidates.iter().map(|c| BeamEntry { node: arena.push(c.token, c.parent), logp: c.logp, last: Some(c.token) }),
            );
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let finals = &prev[target];
    if finals.is_empty() {
        return Err(DecodeError::EmptyCell { slots, target });
    }
    Ok(finals
        .iter()
        .map(|h| {
            let tokens = arena.path(h.node);
            let collapsed_len = mode.apply(&tokens, blank).len();
            Hypothesis { tokens, logp: h.logp, last: h.last, collapsed_len }
        })
        .collect())
}

/// Result of a length-controlled decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub words: Vec<usize>,
    pub tokens: Vec<usize>,
    pub logp: f64,
}

/// Best path of cell `(S, T)`, collapsed to exactly `target` words.
pub fn length_control_decode(
    lattice: &LogProbLattice,
    target: usize,
    beam: usize,
    mode: CollapseMode,
) -> Result<Decoded> {
    let best = length_control_beam(lattice, target, beam, mode)?.swap_remove(0);
    let words = best.words(lattice.blank(), mode);
    debug_assert_eq!(words.len(), target);
    Ok(Decoded { words, tokens: best.tokens, logp: best.logp })
}

/// Highest-probability path whose collapse has exactly `target` words, by
/// enumerating all `(V+1)^S` paths. Ties go to the lexicographically smaller path.
pub fn exhaustive_best(lattice: &LogProbLattice, target: usize, mode: CollapseMode) -> Result<Decoded> {
    let blank = lattice.blank();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_path(lattice, |path, lp| {
        if best.as_ref().is_some_and(|(_, b)| lp <= *b) {
            return;
        }
        if mode.apply(path, blank).len() == target {
            best = Some((path.to_vec(), lp));
        }
    })?;
    let (tokens, logp) = best.ok_or(DecodeError::EmptyCell { slots: lattice.slots(), target })?;
    Ok(Decoded { words: mode.apply(&tokens, blank), tokens, logp })
}

/// Prefix beam search over collapsed outputs. Each prefix carries the mass of
/// paths ending in a blank and ending in its last word; the most probable complete
/// prefix is returned. Length is not controlled.
pub fn ctc_beam_search(lattice: &LogProbLattice, beam: usize) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    let blank = lattice.blank();
    let ninf = f64::NEG_INFINITY;
    let mut beams: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, ninf)];
    for row in lattice.rows() {
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, pb, pw) in &beams {
            let total = log_add_exp(*pb, *pw);
            let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
            e.0 = log_add_exp(e.0, total + row[blank]);
            let last = prefix.last().copied();
            for (c, &lp) in row.iter().enumerate() {
                if c == blank || lp == ninf {
                    continue;
                }
                if Some(c) == last {
                    let e = next.get_mut(prefix).expect("inserted above");
                    e.1 = log_add_exp(e.1, pw + lp);
                    let mut ext = prefix.clone();
                    ext.push(c);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add_exp(e.1, pb + lp);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(c);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add_exp(e.1, total + lp);
                }
            }
        }
        let mut scored: Vec<(Vec<usize>, f64, f64)> = next.into_iter().map(|(p, (b, w))| (p, b, w)).collect();
        scored.sort_by(|a, b| rank(log_add_exp(a.1, a.2), &a.0, log_add_exp(b.1, b.2), &b.0));
        scored.truncate(beam);
        beams = scored;
    }
    Ok(beams.swap_remove(0).0)
}

/// Decoder selection for batch summarization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderKind {
    Greedy,
    Truncate,
    #[default]
    LengthControl,
    CtcBeam,
}

impl FromStr for DecoderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "truncate" => Ok(Self::Truncate),
            "length-control" | "length_control" => Ok(Self::LengthControl),
            "ctc-beam" | "ctc_beam" => Ok(Self::CtcBeam),
            other => Err(format!("unknown decoder {other:?}")),
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Greedy => "greedy",
            Self::Truncate => "truncate",
            Self::LengthControl => "length-control",
            Self::CtcBeam => "ctc-beam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub decoder: DecoderKind,
    pub length: usize,
    pub beam: usize,
    pub mode: CollapseMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { decoder: DecoderKind::LengthControl, length: 8, beam: DEFAULT_BEAM, mode: CollapseMode::Merge }
    }
}

/// Runs the configured decoder. The target length is capped at the slot count;
/// beam-search output is truncated to it as well.
pub fn decode(lattice: &LogProbLattice, config: &DecodeConfig) -> Result<Vec<usize>> {
    let length = config.length.min(lattice.slots());
    match config.decoder {
        DecoderKind::Greedy => Ok(greedy_decode(lattice)),
        DecoderKind::Truncate => Ok(truncate_decode(lattice, length)),
        DecoderKind::LengthControl => Ok(length_control_decode(lattice, length, config.beam, config.mode)?.words),
        DecoderKind::CtcBeam => {
            let mut out = ctc_beam_search(lattice, config.beam)?;
            out.truncate(length);
            Ok(out)
        }
    }
}

/// Word ids of the worked two-slot example: `I`, `like`, `coding`, then the blank.
pub mod fixture {
    use crate::lattice::LogProbLattice;

    pub const I: usize = 0;
    pub const LIKE: usize = 1;
    pub const CODING: usize = 2;
    pub const BLANK: usize = 3;
    pub const WORDS: [&str; 3] = ["I", "like", "coding"];

    /// Two slots over three words and a blank, where greedy commitment to the
    /// first slot's argmax misses the best two-word merged output.
    pub fn two_slot_lattice() -> LogProbLattice {
        LogProbLattice::from_prob_rows(&[vec![0.39, 0.4, 0.1, 0.11], vec![0.1, 0.9, 0.0, 0.0]])
            .expect("rows are normalized")
    }

    pub fn render(ids: &[usize]) -> String {
        ids.iter().map(|&i| WORDS.get(i).copied().unwrap_or("<eps>")).collect::<Vec<_>>().join(" ")
    }
}
