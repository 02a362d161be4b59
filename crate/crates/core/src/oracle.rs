//! Randomized self-checks of the CTC and decoding dynamic programs against
//! brute-force enumeration.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{brute_force_distribution, brute_force_marginal, marginal_log_prob};
use crate::decode::{exhaustive_best, fixture, length_control_decode, CollapseMode, DecodeError};
use crate::lattice::LogProbLattice;

pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSizes {
    pub trials: usize,
    pub max_slots: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for OracleSizes {
    fn default() -> Self {
        Self { trials: 1000, max_slots: 6, max_words: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteResult {
    pub passed: usize,
    pub failed: usize,
    /// Lattice text and a description of the first failure.
    pub counterexample: Option<String>,
}

impl SuiteResult {
    fn record(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(describe());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub ctc: SuiteResult,
    pub decode: SuiteResult,
}

impl OracleReport {
    pub fn ok(&self) -> bool {
        self.ctc.failed == 0 && self.decode.failed == 0
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, r) in [("ctc marginal", &self.ctc), ("no-merge B=1 decode", &self.decode)] {
            writeln!(f, "{name}: {} passed, {} failed", r.passed, r.failed)?;
            if let Some(c) = &r.counterexample {
                writeln!(f, "counterexample:\n{c}")?;
            }
        }
        Ok(())
    }
}

fn random_instance(rng: &mut ChaCha8Rng, sizes: &OracleSizes) -> LogProbLattice {
    let slots = rng.random_range(1..=sizes.max_slots);
    let words = rng.random_range(1..=sizes.max_words);
    LogProbLattice::random(slots, words, 3.0, rng)
}

/// Marginal likelihoods of a random target and partition sums over all outputs.
pub fn check_ctc(sizes: &OracleSizes) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(sizes.seed);
    let mut result = SuiteResult::default();
    for _ in 0..sizes.trials {
        let lat = random_instance(&mut rng, sizes);
        let len = rng.random_range(0..=lat.slots());
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..lat.num_words())).collect();
        let dp = marginal_log_prob(&lat, &target).map(f64::exp);
        let brute = brute_force_marginal(&lat, &target);
        let ok = matches!((&dp, &brute), (Ok(a), Ok(b)) if (a - b).abs() < TOLERANCE);
        result.record(ok, || format!("target {target:?}: dp {dp:?}, enumeration {brute:?}\n{}", lat.to_text()));

        let partition: Result<f64, String> = brute_force_distribution(&lat)
            .map_err(|e| e.to_string())
            .and_then(|dist| dist.keys().map(|y| marginal_log_prob(&lat, y).map(f64::exp).map_err(|e| e.to_string())).sum());
        let ok = matches!(partition, Ok(z) if (z - 1.0).abs() < TOLERANCE);
        result.record(ok, || format!("partition sum {partition:?}\n{}", lat.to_text()));
    }
    result
}

/// Compares a decoder against exhaustive no-merge search for every target length.
pub fn check_decoder<F>(sizes: &OracleSizes, decoder: F) -> SuiteResult
where
    F: Fn(&LogProbLattice, usize) -> Result<Vec<usize>, DecodeError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(sizes.seed.wrapping_add(1));
    let mut result = SuiteResult::default();
    for _ in 0..sizes.trials {
        let lat = random_instance(&mut rng, sizes);
        for t in 0..=lat.slots() {
            let got = decoder(&lat, t);
            let want = exhaustive_best(&lat, t, CollapseMode::NoMerge).map(|d| d.tokens);
            let ok = matches!((&got, &want), (Ok(a), Ok(b)) if a == b);
            result.record(ok, || format!("T={t}: decoder {got:?}, exhaustive {want:?}\n{}", lat.to_text()));
        }
    }
    result
}

pub fn run_oracle_check(sizes: &OracleSizes) -> OracleReport {
    OracleReport {
        ctc: check_ctc(sizes),
        decode: check_decoder(sizes, |lat, t| length_control_decode(lat, t, 1, CollapseMode::NoMerge).map(|d| d.tokens)),
    }
}

/// The two-slot example where the merge-mode decoder with a single-entry beam is
/// not optimal, rendered for display.
pub fn worked_example() -> Result<String, DecodeError> {
    let lat = fixture::two_slot_lattice();
    let show = |d: &crate::decode::Decoded| format!("{:?} (p = {:.3})", fixture::render(&d.words), d.logp.exp());
    let merge1 = length_control_decode(&lat, 2, 1, CollapseMode::Merge)?;
    let merge2 = length_control_decode(&lat, 2, 2, CollapseMode::Merge)?;
    let exact = exhaustive_best(&lat, 2, CollapseMode::Merge)?;
    let no_merge = length_control_decode(&lat, 2, 1, CollapseMode::NoMerge)?;
    Ok(format!(
        "merge, B=1:          {}\nmerge, exhaustive:   {}\nmerge, B=2:          {}\nno_merge, B=1:       {}\n",
        show(&merge1),
        show(&exact),
        show(&merge2),
        show(&no_merge)
    ))
}
