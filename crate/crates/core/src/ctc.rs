//! CTC collapse functions and the marginal-likelihood dynamic program.
//!
//! The forward table keeps two log-space quantities per cell `(s, t)`: the mass
//! of prefixes `w[..s]` collapsing to `y[..t]` whose last token is the blank,
//! and the mass whose last token is a word.

use std::collections::HashMap;

use thiserror::Error;

use crate::lattice::{log_add_exp, LogProbLattice};

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("target has {target} words but the lattice has only {slots} slots")]
    TargetTooLong { target: usize, slots: usize },
    #[error("target contains the blank token or an id outside the lattice")]
    TargetContainsBlank,
    #[error("{0} sequences exceed the enumeration limit")]
    InstanceTooLarge(f64),
}

pub type Result<T> = std::result::Result<T, CtcError>;

/// Upper bound on `(V+1)^S` for brute-force enumeration.
pub const ENUMERATION_LIMIT: f64 = 1e6;

/// Merges consecutive repeats (unless separated by the blank), then drops blanks.
pub fn collapse(tokens: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = blank;
    for &t in tokens {
        if t != blank && t != prev {
            out.push(t);
        }
        prev = t;
    }
    out
}

/// Drops blanks only; repeated words survive.
pub fn collapse_keep_repeats(tokens: &[usize], blank: usize) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t != blank).collect()
}

/// Log-space forward variables, indexed `[s-1][t]` for slots `s = 1..=S`.
#[derive(Debug, Clone)]
pub struct AlphaTable {
    pub blank: Vec<Vec<f64>>,
    pub word: Vec<Vec<f64>>,
}

impl AlphaTable {
    /// `log(alpha_blank + alpha_word)` at slot `s` (1-based) and prefix length `t`.
    pub fn total(&self, s: usize, t: usize) -> f64 {
        log_add_exp(self.blank[s - 1][t], self.word[s - 1][t])
    }
}

fn validate(lattice: &LogProbLattice, target: &[usize]) -> Result<()> {
    if target.iter().any(|&y| y >= lattice.blank()) {
        return Err(CtcError::TargetContainsBlank);
    }
    if target.len() > lattice.slots() {
        return Err(CtcError::TargetTooLong { target: target.len(), slots: lattice.slots() });
    }
    Ok(())
}

/// Runs the forward recursion over the whole lattice.
pub fn alpha_table(lattice: &LogProbLattice, target: &[usize]) -> Result<AlphaTable> {
    validate(lattice, target)?;
    let slots = lattice.slots();
    let len = target.len();
    let blank = lattice.blank();
    let ninf = f64::NEG_INFINITY;
    let mut ab = vec![vec![ninf; len + 1]; slots];
    let mut aw = vec![vec![ninf; len + 1]; slots];

    ab[0][0] = lattice.get(0, blank);
    if len >= 1 {
        aw[0][1] = lattice.get(0, target[0]);
    }
    for s in 1..slots {
        let lp_blank = lattice.get(s, blank);
        for t in 0..=len.min(s + 1) {
            ab[s][t] = log_add_exp(ab[s - 1][t], aw[s - 1][t]) + lp_blank;
            if t == 0 {
                continue;
            }
            // The first word has no predecessor and takes the non-repeat branch.
            let enter = if t >= 2 && target[t - 1] == target[t - 2] {
                ab[s - 1][t - 1]
            } else {
                log_add_exp(ab[s - 1][t - 1], aw[s - 1][t - 1])
            };
            aw[s][t] = log_add_exp(enter, aw[s - 1][t]) + lattice.get(s, target[t - 1]);
        }
    }
    Ok(AlphaTable { blank: ab, word: aw })
}

/// `log P(target | x)` summed over every token path that collapses to `target`.
pub fn marginal_log_prob(lattice: &LogProbLattice, target: &[usize]) -> Result<f64> {
    let table = alpha_table(lattice, target)?;
    Ok(table.total(lattice.slots(), target.len()))
}

/// Marginal log-probability and its gradient with respect to every lattice entry,
/// by reverse-mode differentiation of the forward recursion.
///
/// The gradient is all zeros when the target is unreachable (value `-inf`).
pub fn marginal_log_prob_with_grad(lattice: &LogProbLattice, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let table = alpha_table(lattice, target)?;
    let slots = lattice.slots();
    let width = lattice.width();
    let blank = lattice.blank();
    let len = target.len();
    let (ab, aw) = (&table.blank, &table.word);
    let total = table.total(slots, len);
    let mut grad = vec![0.0; slots * width];
    if total == f64::NEG_INFINITY {
        return Ok((total, grad));
    }

    // d total / d (log node)
    let mut gb = vec![vec![0.0; len + 1]; slots];
    let mut gw = vec![vec![0.0; len + 1]; slots];
    let share = |node: f64, of: f64| if node == f64::NEG_INFINITY { 0.0 } else { (node - of).exp() };
    gb[slots - 1][len] = share(ab[slots - 1][len], total);
    gw[slots - 1][len] = share(aw[slots - 1][len], total);

    for s in (1..slots).rev() {
        let lp_blank = lattice.get(s, blank);
        for t in 0..=len.min(s + 1) {
            let g = gb[s][t];
            if g != 0.0 {
                grad[s * width + blank] += g;
                let inner = ab[s][t] - lp_blank;
                gb[s - 1][t] += g * share(ab[s - 1][t], inner);
                gw[s - 1][t] += g * share(aw[s - 1][t], inner);
            }
            if t == 0 {
                continue;
            }
            let g = gw[s][t];
            if g != 0.0 {
                let lp = lattice.get(s, target[t - 1]);
                grad[s * width + target[t - 1]] += g;
                let inner = aw[s][t] - lp;
                gw[s - 1][t] += g * share(aw[s - 1][t], inner);
                if t >= 2 && target[t - 1] == target[t - 2] {
                    gb[s - 1][t - 1] += g * share(ab[s - 1][t - 1], inner);
                } else {
                    gb[s - 1][t - 1] += g * share(ab[s - 1][t - 1], inner);
                    gw[s - 1][t - 1] += g * share(aw[s - 1][t - 1], inner);
                }
            }
        }
    }
    grad[blank] += gb[0][0];
    if len >= 1 {
        grad[target[0]] += gw[0][1];
    }
    Ok((total, grad))
}

fn enumeration_size(lattice: &LogProbLattice) -> Result<usize> {
    let size = (lattice.width() as f64).powi(lattice.slots() as i32);
    if size > ENUMERATION_LIMIT {
        return Err(CtcError::InstanceTooLarge(size));
    }
    Ok(size as usize)
}

/// Visits every token sequence of length S in lexicographic order with its joint
/// log-probability (accumulated left to right).
pub fn for_each_path<F: FnMut(&[usize], f64)>(lattice: &LogProbLattice, mut visit: F) -> Result<()> {
    enumeration_size(lattice)?;
    let slots = lattice.slots();
    let width = lattice.width();
    let mut path = vec![0usize; slots];
    loop {
        visit(&path, lattice.path_log_prob(&path));
        let mut i = slots;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            path[i] += 1;
            if path[i] < width {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Probability (not log) of `target` by direct enumeration of all token paths.
pub fn brute_force_marginal(lattice: &LogProbLattice, target: &[usize]) -> Result<f64> {
    if target.iter().any(|&y| y >= lattice.blank()) {
        return Err(CtcError::TargetContainsBlank);
    }
    let blank = lattice.blank();
    let mut total = 0.0;
    for_each_path(lattice, |path, lp| {
        if collapse(path, blank) == target {
            total += lp.exp();
        }
    })?;
    Ok(total)
}

/// Probability of every reachable collapsed output, by enumeration.
pub fn brute_force_distribution(lattice: &LogProbLattice) -> Result<HashMap<Vec<usize>, f64>> {
    let blank = lattice.blank();
    let mut dist: HashMap<Vec<usize>, f64> = HashMap::new();
    for_each_path(lattice, |path, lp| {
        *dist.entry(collapse(path, blank)).or_insert(0.0) += lp.exp();
    })?;
    Ok(dist)
}
